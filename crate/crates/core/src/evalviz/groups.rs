use std::collections::BTreeMap;

use crate::error::{LneError, Result};

use super::metrics::{mean_sd, welch_t_test, WelchTest};

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub group: String,
    pub n: usize,
    pub mean_norm: f64,
    pub sd_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupComparison {
    pub a: String,
    pub b: String,
    pub test: WelchTest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupNormStats {
    pub groups: Vec<GroupSummary>,
    pub comparisons: Vec<GroupComparison>,
}

pub fn euclidean_norms(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// Per-group mean ‖Δz‖ and Welch tests for `pairs` of group names (every
/// pair of present groups when `pairs` is empty).
pub fn group_norm_stats(dz: &[Vec<f64>], labels: &[String], pairs: &[(String, String)]) -> Result<GroupNormStats> {
    if dz.len() != labels.len() {
        return Err(LneError::Shape(format!("{} vectors for {} labels", dz.len(), labels.len())));
    }
    let norms = euclidean_norms(dz);
    let mut by_group: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (n, l) in norms.iter().zip(labels) {
        by_group.entry(l.as_str()).or_default().push(*n);
    }
    let mut groups = Vec::new();
    for (g, v) in &by_group {
        if v.len() < 2 {
            return Err(LneError::Invalid(format!("group {g} has {} sample(s); at least 2 needed", v.len())));
        }
        let (mean_norm, sd_norm) = mean_sd(v);
        groups.push(GroupSummary {
            group: g.to_string(),
            n: v.len(),
            mean_norm,
            sd_norm,
        });
    }
    let requested: Vec<(String, String)> = if pairs.is_empty() {
        let names: Vec<&str> = by_group.keys().copied().collect();
        let mut all = Vec::new();
        for i in 0..names.len() {
            for j in i + 1..names.len() {
                all.push((names[i].to_string(), names[j].to_string()));
            }
        }
        all
    } else {
        pairs.to_vec()
    };
    let mut comparisons = Vec::new();
    for (a, b) in requested {
        let get = |g: &str| {
            by_group
                .get(g)
                .ok_or_else(|| LneError::Invalid(format!("group {g} not present")))
        };
        let test = welch_t_test(get(&a)?, get(&b)?)?;
        comparisons.push(GroupComparison { a, b, test });
    }
    Ok(GroupNormStats { groups, comparisons })
}

impl GroupNormStats {
    /// `kind,group_a,group_b,n,mean_norm,sd_norm,t,df,p` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,group_a,group_b,n,mean_norm,sd_norm,t,df,p\n");
        for g in &self.groups {
            s.push_str(&format!("group,{},,{},{},{},,,\n", g.group, g.n, g.mean_norm, g.sd_norm));
        }
        for c in &self.comparisons {
            s.push_str(&format!("welch,{},{},,,,{},{},{}\n", c.a, c.b, c.test.t, c.test.df, c.test.p));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_vectors_have_zero_norm() {
        assert_eq!(euclidean_norms(&[vec![0.0; 4]]), vec![0.0]);
    }

    #[test]
    fn identical_groups() {
        let dz: Vec<Vec<f64>> = (0..80).map(|i| vec![(i % 40) as f64 * 0.1, 1.0]).collect();
        let labels: Vec<String> = (0..80).map(|i| if i < 40 { "A" } else { "B" }.to_string()).collect();
        let s = group_norm_stats(&dz, &labels, &[]).unwrap();
        assert_eq!(s.groups.len(), 2);
        assert_eq!(s.comparisons.len(), 1);
        assert!(s.comparisons[0].test.t.abs() < 1e-12);
        assert!((s.comparisons[0].test.p - 1.0).abs() < 1e-12);
        assert_eq!(s.to_csv().lines().count(), 4);
    }

    #[test]
    fn singleton_group_rejected() {
        let dz = vec![vec![1.0], vec![2.0], vec![3.0]];
        let labels = vec!["A".to_string(), "A".to_string(), "B".to_string()];
        assert!(group_norm_stats(&dz, &labels, &[]).is_err());
    }
}
