use super::{Cohort, Group, Image};

/// Ordered same-subject scan pair `(x_t, x_s)` with `x_t` acquired first.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub subject_id: String,
    pub x_t: Image,
    pub x_s: Image,
    pub delta_t: f64,
    pub age_t: f64,
    pub age_s: f64,
    pub visit_t: usize,
    pub visit_s: usize,
    pub group: Option<Group>,
    /// Ground-truth aging speed of the subject (evaluation only).
    pub speed: f64,
}

/// All ordered pairs `t < s` of each subject's visits, `v(v−1)/2` per subject.
pub fn build_pairs(cohort: &Cohort) -> Vec<ImagePair> {
    let mut pairs = Vec::new();
    for subject in cohort.subjects.values() {
        let v = subject.visits.len();
        if v < 2 {
            log::warn!("subject {} has {v} visit(s); no pairs formed", subject.id);
            continue;
        }
        for t in 0..v {
            for s in t + 1..v {
                let (a, b) = (&subject.visits[t], &subject.visits[s]);
                let delta_t = b.age - a.age;
                if !(delta_t > 0.0) {
                    log::warn!("subject {}: visits {t} and {s} are not strictly ordered; skipped", subject.id);
                    continue;
                }
                pairs.push(ImagePair {
                    subject_id: subject.id.clone(),
                    x_t: a.image.clone(),
                    x_s: b.image.clone(),
                    delta_t,
                    age_t: a.age,
                    age_s: b.age,
                    visit_t: t,
                    visit_s: s,
                    group: subject.group,
                    speed: subject.speed,
                });
            }
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::cohort::{Subject, Visit};

    fn subject(id: &str, ages: &[f64]) -> Subject {
        Subject {
            id: id.into(),
            group: None,
            speed: 1.0,
            visits: ages
                .iter()
                .map(|&age| Visit {
                    subject_id: id.into(),
                    age,
                    image: Image::zeros(2, 2),
                    group: None,
                    brain_state: 0.0,
                })
                .collect(),
        }
    }

    fn cohort(subjects: Vec<Subject>) -> Cohort {
        Cohort {
            height: 2,
            width: 2,
            subjects: subjects.into_iter().map(|s| (s.id.clone(), s)).collect::<BTreeMap<_, _>>(),
            generator: None,
        }
    }

    #[test]
    fn three_visits_give_three_pairs() {
        let pairs = build_pairs(&cohort(vec![subject("a", &[70.0, 72.0, 75.0])]));
        let dts: Vec<f64> = pairs.iter().map(|p| p.delta_t).collect();
        assert_eq!(dts, vec![2.0, 5.0, 3.0]);
    }

    #[test]
    fn two_visits_give_one_pair_and_singletons_are_skipped() {
        let pairs = build_pairs(&cohort(vec![subject("a", &[50.0, 53.5]), subject("b", &[60.0])]));
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].subject_id, "a");
    }
}
