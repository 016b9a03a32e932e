use lne_core::evalviz::{build_field_plot, pca_2d, render_csv, render_svg, ColorKey};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

/// Top-2 eigenvectors of the sample covariance from a dense symmetric eigensolver.
fn dense_top2(points: &[Vec<f64>]) -> ([Vec<f64>; 2], [f64; 2]) {
    let m = points.len();
    let d = points[0].len();
    let x = DMatrix::from_fn(m, d, |i, j| points[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(m, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (m as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let col = |k: usize| eig.eigenvectors.column(order[k]).iter().copied().collect::<Vec<_>>();
    ([col(0), col(1)], [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Anisotropic cloud: coordinate k scaled by `scales[k]`, then mixed by a fixed shear.
fn cloud() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (3usize..9, 10usize..60).prop_flat_map(|(d, m)| {
        prop::collection::vec(prop::collection::vec(-1.0..1.0f64, d), m).prop_map(move |raw| {
            raw.into_iter()
                .map(|r| {
                    let s: Vec<f64> = r.iter().enumerate().map(|(k, v)| v * 4.0 / (1.0 + k as f64).powi(2)).collect();
                    (0..d).map(|k| s[k] + 0.3 * s[(k + 1) % d]).collect()
                })
                .collect()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn pca_agrees_with_dense_eigensolver(points in cloud()) {
        let (vecs, vals) = dense_top2(&points);
        // the top pair must be separated for the axes to be identifiable
        prop_assume!(vals[0] > 1.2 * vals[1] && vals[1] > 1e-9);
        let pca = pca_2d(&points).unwrap();
        prop_assert!(dot(&pca.components[0], &vecs[0]).abs() > 0.999);
        prop_assert!((pca.eigenvalues[0] - vals[0]).abs() < 1e-6 * vals[0]);
        prop_assert!((dot(&pca.components[0], &pca.components[0]) - 1.0).abs() < 1e-9);
        prop_assert!(dot(&pca.components[0], &pca.components[1]).abs() < 1e-6);
    }
}

#[test]
fn both_axes_match_with_a_clear_spectrum() {
    let points: Vec<Vec<f64>> = (0..40)
        .map(|i| {
            let t = i as f64;
            vec![5.0 * (t * 0.37).sin(), 2.0 * (t * 1.1).cos(), 0.5 * (t * 2.3).sin(), 0.1 * (t * 0.7).cos()]
        })
        .collect();
    let (vecs, vals) = dense_top2(&points);
    let pca = pca_2d(&points).unwrap();
    for k in 0..2 {
        assert!(dot(&pca.components[k], &vecs[k]).abs() > 0.999, "axis {k}");
        assert!((pca.eigenvalues[k] - vals[k]).abs() < 1e-6 * vals[0]);
    }
}

fn attr(tag: &str, name: &str) -> f64 {
    let key = format!(" {name}=\"");
    let at = tag.find(&key).unwrap() + key.len();
    tag[at..].split('"').next().unwrap().parse().unwrap()
}

/// Arrow endpoints read back from the SVG and mapped to data coordinates.
fn svg_arrows(svg: &str) -> Vec<[f64; 4]> {
    let group = svg.lines().find(|l| l.starts_with("<g id=\"arrows\"")).unwrap();
    let (x0, y0, scale, px0, py0) =
        (attr(group, "data-x0"), attr(group, "data-y0"), attr(group, "data-scale"), attr(group, "data-px0"), attr(group, "data-py0"));
    svg.lines()
        .filter(|l| l.contains("class=\"arrow\""))
        .map(|l| {
            [
                (attr(l, "x1") - px0) / scale + x0,
                (py0 - attr(l, "y1")) / scale + y0,
                (attr(l, "x2") - px0) / scale + x0,
                (py0 - attr(l, "y2")) / scale + y0,
            ]
        })
        .collect()
}

fn csv_arrows(csv: &str) -> Vec<[f64; 4]> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').take(4).map(|v| v.parse().unwrap()).collect();
            [f[0], f[1], f[2], f[3]]
        })
        .collect()
}

#[test]
fn svg_and_csv_coordinates_agree_and_rendering_is_stable() {
    let z_t: Vec<Vec<f64>> = (0..30)
        .map(|i| {
            let t = i as f64 / 3.0;
            vec![t, 0.2 * t * t, (t * 1.7).sin(), 0.1 * (t * 0.3).cos()]
        })
        .collect();
    let z_s: Vec<Vec<f64>> = z_t.iter().map(|z| z.iter().map(|v| v * 1.05 + 0.2).collect()).collect();
    let groups: Vec<String> = (0..30).map(|i| if i % 3 == 0 { "AD" } else { "NC" }.to_string()).collect();
    let plot = build_field_plot(&z_t, &z_s, ColorKey::Group(groups.clone())).unwrap();
    let again = build_field_plot(&z_t, &z_s, ColorKey::Group(groups)).unwrap();
    assert_eq!(render_svg(&plot), render_svg(&again));
    assert_eq!(render_csv(&plot), render_csv(&again));

    let from_svg = svg_arrows(&render_svg(&plot));
    let from_csv = csv_arrows(&render_csv(&plot));
    assert_eq!(from_svg.len(), 30);
    assert_eq!(from_csv.len(), 30);
    for (a, b) in from_svg.iter().zip(&from_csv) {
        for k in 0..4 {
            assert!((a[k] - b[k]).abs() < 1e-6, "{a:?} vs {b:?}");
        }
    }
    // csv coordinates are the PCA projections
    for (i, row) in from_csv.iter().enumerate() {
        let p = plot.pca.project(&z_t[i]);
        assert!((row[0] - p[0]).abs() < 1e-12 && (row[1] - p[1]).abs() < 1e-12);
    }
}
