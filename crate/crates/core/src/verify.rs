//! Ownership verification: decode submitted images, count bits matching the
//! owner's watermark and test against the chance null `Bin(m·N, 1/2)`.

use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bits::{hard_threshold, matched_bits, BitString};
use crate::checkpoint::write_atomic;
use crate::codec::FrozenDecoder;
use crate::error::{invalid, Error, Result};
use crate::image::{Image, ImageBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Minimum aggregate bit accuracy τ for an "owned" decision.
    pub threshold: f64,
    /// Largest p-value accepted as evidence against chance.
    pub alpha: f64,
    /// Resize images whose size differs from the decoder's; reject them otherwise.
    pub resize: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            threshold: 0.9,
            alpha: 1e-6,
            resize: true,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.5 && self.threshold <= 1.0) {
            return Err(Error::Config(format!("threshold {} must lie in (0.5, 1]", self.threshold)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Owned,
    NotOwned,
    Inconclusive,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Owned => "owned",
            Decision::NotOwned => "not-owned",
            Decision::Inconclusive => "inconclusive",
        })
    }
}

/// Owned needs both accuracy ≥ τ and p ≤ α; not-owned needs both to fail.
pub fn decide(accuracy: f64, p_value: f64, cfg: &VerifyConfig) -> Decision {
    match (accuracy >= cfg.threshold, p_value <= cfg.alpha) {
        (true, true) => Decision::Owned,
        (false, false) => Decision::NotOwned,
        _ => Decision::Inconclusive,
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `P(Bin(n, 1/2) ≥ k)`. Large `n` is summed in log space.
pub fn binomial_upper_tail(n: u64, k: u64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    if n <= 1022 {
        // 2^-n is still a normal f64: walk down from C(n, n)/2^n in linear space.
        let mut term = 0.5f64.powi(n as i32);
        let mut sum = term;
        for i in (k + 1..=n).rev() {
            term *= i as f64 / (n - i + 1) as f64;
            sum += term;
        }
        return sum.min(1.0);
    }
    // ln C(n, k) by the product formula, then walk the tail upward.
    let mut ln_c = 0.0;
    for j in 0..k {
        ln_c += ((n - j) as f64).ln() - ((j + 1) as f64).ln();
    }
    let mut acc = f64::NEG_INFINITY;
    let mut i = k;
    loop {
        acc = log_add(acc, ln_c);
        if i == n {
            break;
        }
        ln_c += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
        i += 1;
    }
    (acc - n as f64 * std::f64::consts::LN_2).exp().min(1.0)
}

/// Hard-decoded payload of one image.
pub fn extract_watermark(dec: &FrozenDecoder, x: &Image) -> Result<BitString> {
    Ok(hard_threshold(&dec.decode(x)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageVerdict {
    pub label: String,
    pub matched: usize,
    pub bit_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub per_image: Vec<ImageVerdict>,
    pub payload: usize,
    /// Matched bits `k` over all images.
    pub matched: u64,
    /// `m·N`.
    pub total_bits: u64,
    pub accuracy: f64,
    pub p_value: f64,
    pub decision: Decision,
    pub config: VerifyConfig,
}

impl VerificationReport {
    /// Replace the default index labels, e.g. with file names.
    pub fn with_labels(mut self, labels: &[String]) -> Result<Self> {
        if labels.len() != self.per_image.len() {
            return Err(Error::LengthMismatch {
                left: labels.len(),
                right: self.per_image.len(),
            });
        }
        for (v, l) in self.per_image.iter_mut().zip(labels) {
            v.label = l.clone();
        }
        Ok(self)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,matched_bits,bit_accuracy\n");
        for v in &self.per_image {
            let _ = writeln!(s, "{},{},{}", v.label, v.matched, v.bit_accuracy);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "decision: {}", self.decision);
        let _ = writeln!(s, "images: {}", self.per_image.len());
        let _ = writeln!(s, "payload_bits: {}", self.payload);
        let _ = writeln!(s, "matched_bits: {}", self.matched);
        let _ = writeln!(s, "total_bits: {}", self.total_bits);
        let _ = writeln!(s, "accuracy: {}", self.accuracy);
        let _ = writeln!(s, "p_value: {:e}", self.p_value);
        let _ = writeln!(s, "threshold: {}", self.config.threshold);
        let _ = writeln!(s, "alpha: {:e}", self.config.alpha);
        s.push_str("# p-value assumes independent fair-coin bits under the null; correlated decoder bias makes it optimistic.\n");
        s
    }

    /// Writes `report.txt` and `per_image.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("report.txt"), self.to_text().as_bytes())?;
        write_atomic(&dir.join("per_image.csv"), self.to_csv().as_bytes())
    }
}

/// Assemble a report from per-image matched counts.
pub fn report_from_counts(matched: &[usize], payload: usize, cfg: &VerifyConfig) -> Result<VerificationReport> {
    cfg.validate()?;
    if matched.is_empty() {
        return Err(invalid("verification needs at least one image"));
    }
    if payload == 0 {
        return Err(invalid("payload must be non-empty"));
    }
    if let Some(&bad) = matched.iter().find(|&&k| k > payload) {
        return Err(invalid(format!("{bad} matched bits exceed payload {payload}")));
    }
    let k: u64 = matched.iter().map(|&k| k as u64).sum();
    let total = (matched.len() * payload) as u64;
    let accuracy = k as f64 / total as f64;
    let p_value = binomial_upper_tail(total, k);
    Ok(VerificationReport {
        per_image: matched
            .iter()
            .enumerate()
            .map(|(i, &k)| ImageVerdict {
                label: i.to_string(),
                matched: k,
                bit_accuracy: k as f64 / payload as f64,
            })
            .collect(),
        payload,
        matched: k,
        total_bits: total,
        accuracy,
        p_value,
        decision: decide(accuracy, p_value, cfg),
        config: *cfg,
    })
}

/// Decode every image and test the pooled evidence against `w_gt`.
pub fn verify_ownership(
    dec: &FrozenDecoder,
    images: &[Image],
    w_gt: &BitString,
    cfg: &VerifyConfig,
) -> Result<VerificationReport> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(invalid("verification needs at least one image"));
    }
    if w_gt.len() != dec.payload() {
        return Err(Error::LengthMismatch {
            left: w_gt.len(),
            right: dec.payload(),
        });
    }
    if !cfg.resize {
        if let Some(bad) = images.iter().find(|im| im.size() != dec.size()) {
            return Err(invalid(format!(
                "image size {} differs from decoder size {} and resizing is disabled",
                bad.size(),
                dec.size()
            )));
        }
    }
    let uniform = images.iter().all(|im| im.shape() == images[0].shape());
    let soft = if uniform {
        dec.decode_batch(&ImageBatch::from_images(images)?)?
    } else {
        images.iter().map(|im| dec.decode(im)).collect::<Result<_>>()?
    };
    let matched = soft
        .iter()
        .map(|s| matched_bits(&hard_threshold(s), w_gt))
        .collect::<Result<Vec<_>>>()?;
    report_from_counts(&matched, dec.payload(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tail_closed_forms() {
        let p = binomial_upper_tail(100, 100);
        assert!((p / 0.5f64.powi(100) - 1.0).abs() < 1e-12, "{p}");
        assert_eq!(binomial_upper_tail(10, 0), 1.0);
        assert_eq!(binomial_upper_tail(10, 11), 0.0);
        assert!((binomial_upper_tail(1, 1) - 0.5).abs() < 1e-15);
        assert!((binomial_upper_tail(4, 2) - 11.0 / 16.0).abs() < 1e-15);
        // Symmetry: P(X ≥ k) + P(X ≥ n − k + 1) = 1.
        for k in 0..=31 {
            let s = binomial_upper_tail(30, k) + binomial_upper_tail(30, 31 - k);
            assert!((s - 1.0).abs() < 1e-13, "{k}: {s}");
        }
    }

    #[test]
    fn tail_is_monotone_and_handles_large_n() {
        let mut prev = 1.0;
        for k in 0..=400 {
            let p = binomial_upper_tail(400, k);
            assert!(p <= prev && (0.0..=1.0).contains(&p));
            prev = p;
        }
        let p = binomial_upper_tail(1_000_000, 500_000);
        assert!((p - 0.5).abs() < 1e-3, "{p}");
        assert!(binomial_upper_tail(1_000_000, 600_000) < 1e-300);
    }

    #[test]
    fn decision_examples() {
        let cfg = VerifyConfig::default();
        let owned = report_from_counts(&[100], 100, &cfg).unwrap();
        assert_eq!(owned.decision, Decision::Owned);
        assert!((owned.p_value - 7.888609052210118e-31).abs() < 1e-40);

        let chance = report_from_counts(&[50], 100, &cfg).unwrap();
        assert_eq!(chance.decision, Decision::NotOwned);
        assert!((chance.p_value - 0.5397946186935895).abs() < 1e-12, "{}", chance.p_value);

        let weak = report_from_counts(&[85; 10], 100, &cfg).unwrap();
        assert!((weak.accuracy - 0.85).abs() < 1e-12);
        assert!(weak.p_value < 1e-100);
        assert_eq!(weak.decision, Decision::Inconclusive);
    }

    #[test]
    fn owned_requires_both_conditions() {
        let cfg = VerifyConfig::default();
        // accuracy 1.0 on 10 bits, p = 2^-10 > alpha
        let r = report_from_counts(&[10], 10, &cfg).unwrap();
        assert_eq!(r.decision, Decision::Inconclusive);
        for k in 0..=100 {
            let r = report_from_counts(&[k], 100, &cfg).unwrap();
            if r.decision == Decision::Owned {
                assert!(r.accuracy >= cfg.threshold && r.p_value <= cfg.alpha);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = VerifyConfig::default();
        assert!(report_from_counts(&[], 10, &cfg).is_err());
        assert!(report_from_counts(&[11], 10, &cfg).is_err());
        let bad = VerifyConfig {
            threshold: 0.5,
            ..cfg
        };
        assert!(matches!(report_from_counts(&[1], 10, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn report_text_and_csv() {
        let r = report_from_counts(&[3, 4], 4, &VerifyConfig::default())
            .unwrap()
            .with_labels(&["a.png".into(), "b.png".into()])
            .unwrap();
        assert_eq!(r.to_csv(), "image,matched_bits,bit_accuracy\na.png,3,0.75\nb.png,4,1\n");
        let text = r.to_text();
        assert!(text.starts_with("decision: not-owned\n"));
        assert!(text.contains("matched_bits: 7\n"));
    }
}
