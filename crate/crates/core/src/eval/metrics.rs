use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Per-class recalls plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub balanced_accuracy: f64,
    pub accuracy: f64,
    /// Recall per class index; `None` for classes with no instances.
    pub recalls: Vec<Option<f64>>,
    /// Classes left out of the mean because nothing belongs to them.
    pub empty_classes: Vec<usize>,
}

fn class_index<T: PartialEq>(classes: &[T], x: &T) -> Option<usize> {
    classes.iter().position(|c| c == x)
}

/// Balanced and plain accuracy. A prediction outside `classes` counts as
/// wrong; every truth must be one of `classes`.
pub fn balanced_accuracy<T: PartialEq + std::fmt::Debug>(
    predictions: &[T],
    truths: &[T],
    classes: &[T],
) -> Result<ClassScores, EvalError> {
    if truths.is_empty() {
        return Err(EvalError::Empty);
    }
    if predictions.len() != truths.len() {
        return Err(EvalError::Contract(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let mut total = vec![0usize; classes.len()];
    let mut hit = vec![0usize; classes.len()];
    for (p, t) in predictions.iter().zip(truths) {
        let ti = class_index(classes, t)
            .ok_or_else(|| EvalError::Contract(format!("truth {t:?} is not a declared class")))?;
        total[ti] += 1;
        if p == t {
            hit[ti] += 1;
        }
    }
    let recalls: Vec<Option<f64>> = total
        .iter()
        .zip(&hit)
        .map(|(&n, &h)| (n > 0).then(|| h as f64 / n as f64))
        .collect();
    let present: Vec<f64> = recalls.iter().flatten().copied().collect();
    Ok(ClassScores {
        balanced_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        accuracy: hit.iter().sum::<usize>() as f64 / truths.len() as f64,
        empty_classes: (0..classes.len()).filter(|&i| total[i] == 0).collect(),
        recalls,
    })
}

pub fn accuracy<T: PartialEq>(predictions: &[T], truths: &[T]) -> Result<f64, EvalError> {
    if truths.is_empty() {
        return Err(EvalError::Empty);
    }
    if predictions.len() != truths.len() {
        return Err(EvalError::Contract("length mismatch".into()));
    }
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truths.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Ratios whose denominator was zero and were set to 0 by convention.
    pub undefined: Vec<String>,
}

pub fn invasion_prf(predictions: &[bool], truths: &[bool]) -> Result<Prf, EvalError> {
    if truths.is_empty() {
        return Err(EvalError::Empty);
    }
    if predictions.len() != truths.len() {
        return Err(EvalError::Contract("length mismatch".into()));
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for (&p, &t) in predictions.iter().zip(truths) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let mut undefined = Vec::new();
    let mut ratio = |num: usize, den: usize, name: &str| {
        if den == 0 {
            undefined.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp, "precision");
    let recall = ratio(tp, tp + fn_, "recall");
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        undefined,
    })
}

/// (primary hit, combined hit). Order matters: 3+4 is not 4+3.
pub fn gleason_accuracy(pred: (u8, u8), truth: (u8, u8)) -> Result<(bool, bool), EvalError> {
    for p in [pred.0, pred.1, truth.0, truth.1] {
        if !(3..=5).contains(&p) {
            return Err(EvalError::Contract(format!("Gleason pattern {p} outside 3-5")));
        }
    }
    Ok((pred.0 == truth.0, pred == truth))
}

/// Collapse a Fuhrman/ISUP grade to low (1-2) or high (3-4).
pub fn grade_band(grade: u8) -> Option<&'static str> {
    match grade {
        1 | 2 => Some("low"),
        3 | 4 => Some("high"),
        _ => None,
    }
}

/// Fraction of transcripts whose pre-evidence text matches any pattern,
/// case-insensitively. `texts` holds one string per transcript.
pub fn pemr(texts: &[String], patterns: &[String]) -> Result<f64, EvalError> {
    if patterns.is_empty() {
        return Err(EvalError::Contract("PEMR needs at least one pattern".into()));
    }
    if texts.is_empty() {
        return Ok(0.0);
    }
    let lowered: Vec<String> = patterns.iter().map(|p| p.to_lowercase()).collect();
    let hits = texts
        .iter()
        .filter(|t| {
            let t = t.to_lowercase();
            lowered.iter().any(|p| t.contains(p))
        })
        .count();
    Ok(hits as f64 / texts.len() as f64)
}

/// Default PEMR pattern sets per task.
pub fn default_pemr_patterns() -> BTreeMap<String, Vec<String>> {
    let set = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    BTreeMap::from([
        (
            "nuclear".to_string(),
            set(&["nuclear grade", "fuhrman", "isup grade", "tool-nuclear", "nucleoli"]),
        ),
        ("gleason".to_string(), set(&["gleason", "tool-gleason"])),
        (
            "invasion".to_string(),
            set(&["invasion", "lymphovascular", "perineural", "tool-invasion"]),
        ),
    ])
}

/// Pull "nuclear grade N" / "grade N" out of a diagnosis string.
pub fn parse_nuclear_grade(text: &str) -> Option<u8> {
    let lower = text.to_lowercase();
    let at = lower.find("grade")?;
    let rest = lower[at + "grade".len()..].trim_start();
    let roman = [("iv", 4), ("iii", 3), ("ii", 2), ("i", 1)];
    if let Some(d) = rest.chars().next().and_then(|c| c.to_digit(10)) {
        return u8::try_from(d).ok();
    }
    roman.iter().find_map(|(r, g)| {
        let tail = rest.strip_prefix(r)?;
        tail.chars()
            .next()
            .is_none_or(|c| !c.is_alphanumeric())
            .then_some(*g)
    })
}

/// Pull "a+b" out of a Gleason score mention.
pub fn parse_gleason(text: &str) -> Option<(u8, u8)> {
    let lower = text.to_lowercase();
    let at = lower.find("gleason")?;
    let bytes: Vec<char> = lower[at..].chars().collect();
    bytes.windows(3).find_map(|w| {
        let a = w[0].to_digit(10)?;
        let b = w[2].to_digit(10)?;
        (w[1] == '+').then_some((a as u8, b as u8))
    })
}

/// Whether a final answer asserts invasion.
pub fn mentions_invasion(text: &str) -> bool {
    let lower = text.to_lowercase();
    let negated = ["no invasion", "without invasion", "invasion: not detected", "no evidence of invasion"];
    lower.contains("invasion") && !negated.iter().any(|n| lower.contains(n))
}
