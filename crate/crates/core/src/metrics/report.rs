//! Per-image metric reports in a line format and as JSON.
//!
//! Line format:
//!
//! ```text
//! id=<s> miou=<f> mdsc=<f> recall=<f> precision=<f> accuracy=<f> f2=<f>
//! MEAN miou=<f> mdsc=<f> recall=<f> precision=<f> accuracy=<f> f2=<f>
//! PVALUE vs=<name> p=<f>
//! ```
//!
//! Numbers are printed in shortest round-trip form, so both formats parse
//! back to identical values. The line format does not carry the test name;
//! it reads back as the default test.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::stats::{paired_pvalue, SignificanceTest};
use super::{score_prediction, Scores};
use crate::data::{stack_batch, Sample};
use crate::error::{Error, Result};
use crate::model::FocusNet;
use crate::module::ForwardCtx;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub id: String,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueRow {
    pub vs: String,
    pub test: String,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ImageRow>,
    pub mean: Scores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pvalue: Option<PValueRow>,
}

fn fields(s: &Scores) -> String {
    Scores::NAMES
        .iter()
        .zip(s.values())
        .map(|(n, v)| format!("{n}={v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

impl MetricsReport {
    /// Rows in the given order; the mean is recomputed from them.
    pub fn new(rows: Vec<ImageRow>) -> Self {
        let scores: Vec<Scores> = rows.iter().map(|r| r.scores).collect();
        MetricsReport {
            mean: Scores::mean(&scores),
            rows,
            pvalue: None,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!("id={} {}\n", r.id, fields(&r.scores)));
        }
        out.push_str(&format!("MEAN {}\n", fields(&self.mean)));
        if let Some(p) = &self.pvalue {
            out.push_str(&format!("PVALUE vs={} p={}\n", p.vs, p.p));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |l: &str| Error::Data(format!("malformed report line `{l}`"));
        let mut rows = Vec::new();
        let mut mean = None;
        let mut pvalue = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let head = parts.next().ok_or_else(|| bad(line))?;
            let kv: HashMap<&str, &str> = parts.filter_map(|p| p.split_once('=')).collect();
            let scores = || -> Result<Scores> {
                let mut v = [0.0; 6];
                for (slot, name) in v.iter_mut().zip(Scores::NAMES) {
                    *slot = kv.get(name).and_then(|s| s.parse().ok()).ok_or_else(|| bad(line))?;
                }
                Ok(Scores::from_values(v))
            };
            if let Some(id) = head.strip_prefix("id=") {
                rows.push(ImageRow {
                    id: id.to_string(),
                    scores: scores()?,
                });
            } else if head == "MEAN" {
                mean = Some(scores()?);
            } else if head == "PVALUE" {
                pvalue = Some(PValueRow {
                    vs: kv.get("vs").ok_or_else(|| bad(line))?.to_string(),
                    test: SignificanceTest::default().to_string(),
                    p: kv.get("p").and_then(|s| s.parse().ok()).ok_or_else(|| bad(line))?,
                });
            } else {
                return Err(bad(line));
            }
        }
        Ok(MetricsReport {
            mean: mean.ok_or_else(|| Error::Data("report has no MEAN row".into()))?,
            rows,
            pvalue,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("bad report JSON: {e}")))
    }

    /// Per-image Dice paired with `baseline` by image id.
    pub fn compare(&mut self, baseline: &MetricsReport, name: &str, test: SignificanceTest) -> Result<f64> {
        let base: HashMap<&str, f64> = baseline.rows.iter().map(|r| (r.id.as_str(), r.scores.mdsc)).collect();
        if base.len() != self.rows.len() {
            return Err(Error::Data(format!(
                "cannot pair {} images with {} baseline images",
                self.rows.len(),
                base.len()
            )));
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        for r in &self.rows {
            let v = base
                .get(r.id.as_str())
                .ok_or_else(|| Error::Data(format!("image `{}` missing from baseline report", r.id)))?;
            a.push(r.scores.mdsc);
            b.push(*v);
        }
        let p = paired_pvalue(&a, &b, test)?;
        self.pvalue = Some(PValueRow {
            vs: name.to_string(),
            test: test.to_string(),
            p,
        });
        Ok(p)
    }
}

/// Eval-mode prediction `sigmoid(P̂) >= threshold` scored per image, in
/// dataset order.
pub fn evaluate<T: Real>(model: &FocusNet<T>, samples: &[Sample], threshold: f64) -> Result<MetricsReport> {
    const CHUNK: usize = 8;
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        for s in &refs {
            if s.size() != model.config.input_size {
                return Err(Error::Data(format!(
                    "image `{}` is {:?}, model expects {:?}",
                    s.id,
                    s.size(),
                    model.config.input_size
                )));
            }
        }
        let (images, masks) = stack_batch::<T>(&refs)?;
        let prob = model
            .forward(&images, &mut ForwardCtx::eval())?
            .heads
            .fused
            .sigmoid()
            .to_f64_vec();
        let masks = masks.to_f64_vec();
        let per = prob.len() / chunk.len();
        for (i, s) in chunk.iter().enumerate() {
            let range = i * per..(i + 1) * per;
            rows.push(ImageRow {
                id: s.id.clone(),
                scores: score_prediction(&prob[range.clone()], &masks[range], threshold)?,
            });
        }
    }
    Ok(MetricsReport::new(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> MetricsReport {
        let rows = (0..7)
            .map(|i| ImageRow {
                id: format!("img{i}"),
                scores: Scores::from_values([0.1 * i as f64, 0.7, 1.0 / 3.0, 0.5, 0.99, 0.25]),
            })
            .collect();
        MetricsReport::new(rows)
    }

    #[test]
    fn mean_matches_rows() {
        let r = report();
        let m: f64 = r.rows.iter().map(|x| x.scores.miou).sum::<f64>() / 7.0;
        assert_eq!(r.mean.miou, m);
    }

    #[test]
    fn text_and_json_round_trip() {
        let mut r = report();
        let mut base = report();
        base.rows.iter_mut().for_each(|x| x.scores.mdsc -= 0.01 * x.scores.miou);
        r.compare(&base, "baseline", SignificanceTest::Wilcoxon).unwrap();
        assert_eq!(MetricsReport::from_json(&r.to_json()).unwrap(), r);
        assert_eq!(MetricsReport::from_text(&r.to_text()).unwrap(), r);
        assert!(r.to_text().lines().last().unwrap().starts_with("PVALUE vs=baseline p="));
    }

    #[test]
    fn pairing_requires_same_ids() {
        let mut r = report();
        let mut base = report();
        base.rows[3].id = "other".into();
        assert!(matches!(r.compare(&base, "b", SignificanceTest::Wilcoxon), Err(Error::Data(_))));
    }
}
