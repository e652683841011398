use crate::ops::sigmoid;
use crate::tensor::Float;

/// `sigmoid(z) ≥ 0.5` per pixel.
pub fn binarize<T: Float>(logits: &[T]) -> Vec<bool> {
    let half = T::of(0.5);
    logits.iter().map(|&z| sigmoid(z) >= half).collect()
}

/// `2|P∩G| / (|P| + |G|)`; 1 when both masks are empty.
pub fn dsc(pred: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "dsc: masks differ in size");
    let (mut inter, mut sp, mut sg) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += usize::from(p && g);
        sp += usize::from(p);
        sg += usize::from(g);
    }
    if sp + sg == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (sp + sg) as f64
    }
}

/// Fraction of pixels where the masks agree.
pub fn pixel_accuracy(pred: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "pixel_accuracy: masks differ in size");
    if pred.is_empty() {
        return 1.0;
    }
    pred.iter().zip(gt).filter(|(p, g)| p == g).count() as f64 / pred.len() as f64
}

/// Scores of one evaluated sample.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SampleScore {
    pub subgroup: usize,
    pub dsc: f64,
    pub pa: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroupMetrics {
    pub subgroup: String,
    pub dsc: f64,
    pub pa: f64,
    pub n: usize,
}

/// Per-sub-group and overall mean DSC / PA. The overall row is the
/// sample-weighted mean of the sub-group rows.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub per_subgroup: Vec<GroupMetrics>,
    pub overall: GroupMetrics,
}

pub const OVERALL_LABEL: &str = "all";

impl MetricsRecord {
    /// Sub-groups without samples are omitted.
    pub fn from_scores(scores: &[SampleScore], labels: &[String]) -> Self {
        let m = labels.len().max(scores.iter().map(|s| s.subgroup + 1).max().unwrap_or(0));
        let label = |g: usize| labels.get(g).cloned().unwrap_or_else(|| format!("g{g}"));
        let summarize = |name: String, it: &mut dyn Iterator<Item = &SampleScore>| {
            let (mut d, mut p, mut n) = (0.0, 0.0, 0usize);
            for s in it {
                d += s.dsc;
                p += s.pa;
                n += 1;
            }
            let k = n.max(1) as f64;
            GroupMetrics {
                subgroup: name,
                dsc: d / k,
                pa: p / k,
                n,
            }
        };
        let per_subgroup = (0..m)
            .map(|g| summarize(label(g), &mut scores.iter().filter(|s| s.subgroup == g)))
            .filter(|r| r.n > 0)
            .collect();
        let overall = summarize(OVERALL_LABEL.into(), &mut scores.iter());
        Self { per_subgroup, overall }
    }

    /// `subgroup,dsc,pa,n`, one row per sub-group then the overall row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subgroup,dsc,pa,n\n");
        for r in self.per_subgroup.iter().chain(std::iter::once(&self.overall)) {
            out.push_str(&format!("{},{},{},{}\n", r.subgroup, r.dsc, r.pa, r.n));
        }
        out
    }
}
