//! Caption hallucination metrics over pre-extracted object sets.
//!
//! All string matching is exact after lowercasing.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::hash::Hash;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Objects mentioned by one generated caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption_id: String,
    /// Distinct objects of the caption.
    pub objects: Vec<String>,
    /// Object mentions, one list per sentence.
    pub sentences: Vec<Vec<String>>,
}

impl CaptionRecord {
    /// Lowercase everything, deduplicate `objects` and make sure every
    /// sentence mention is listed there.
    pub fn normalized(mut self) -> Self {
        for sentence in &mut self.sentences {
            sentence.iter_mut().for_each(|o| *o = o.to_lowercase());
        }
        let mut seen = HashSet::new();
        let mut objects = Vec::new();
        let mentioned = self.sentences.iter().flatten().cloned();
        for object in self
            .objects
            .iter()
            .map(|o| o.to_lowercase())
            .chain(mentioned)
        {
            if seen.insert(object.clone()) {
                objects.push(object);
            }
        }
        self.objects = objects;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub caption_id: String,
    pub annotated_objects: BTreeSet<String>,
    #[serde(default)]
    pub hallucination_targets: BTreeSet<String>,
}

impl GroundTruth {
    pub fn normalized(self) -> Result<Self> {
        let lower = |s: BTreeSet<String>| s.into_iter().map(|o| o.to_lowercase()).collect();
        let out = Self {
            caption_id: self.caption_id,
            annotated_objects: lower(self.annotated_objects),
            hallucination_targets: lower(self.hallucination_targets),
        };
        if out.annotated_objects.is_empty() {
            return Err(Error::Input(format!(
                "caption {}: annotated_objects is empty",
                out.caption_id
            )));
        }
        Ok(out)
    }
}

/// Which name goes with which ratio in the CHAIR report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChairConvention {
    /// CHAIRs is the hallucinated-object fraction, CHAIRi the
    /// hallucinated-sentence fraction.
    #[default]
    #[serde(alias = "paper")]
    Standard,
    /// The labels swapped: CHAIRi per object, CHAIRs per sentence.
    Original,
}

impl FromStr for ChairConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" | "paper" => Ok(Self::Standard),
            "original" => Ok(Self::Original),
            other => Err(Error::Config(format!("unknown CHAIR convention {other:?}"))),
        }
    }
}

/// Scope over which CHAIR ratios are formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Counts summed over the corpus, then divided.
    #[default]
    Corpus,
    /// Ratio per caption, then averaged.
    PerCaption,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corpus" => Ok(Self::Corpus),
            "per_caption" | "per-caption" => Ok(Self::PerCaption),
            other => Err(Error::Config(format!("unknown pooling {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    pub chairs: f64,
    pub chairi: f64,
}

/// Pair records with their ground truth by `caption_id`, in record order.
fn pair<'a>(
    records: &'a [CaptionRecord],
    truths: &'a [GroundTruth],
) -> Result<Vec<(&'a CaptionRecord, &'a GroundTruth)>> {
    if records.len() != truths.len() {
        return Err(Error::Input(format!(
            "{} captions but {} ground-truth entries",
            records.len(),
            truths.len()
        )));
    }
    let by_id: HashMap<&str, &GroundTruth> =
        truths.iter().map(|t| (t.caption_id.as_str(), t)).collect();
    if by_id.len() != truths.len() {
        return Err(Error::Input("duplicate caption_id in ground truth".into()));
    }
    let mut seen = HashSet::new();
    records
        .iter()
        .map(|r| {
            if !seen.insert(r.caption_id.as_str()) {
                return Err(Error::Input(format!(
                    "duplicate caption_id {}",
                    r.caption_id
                )));
            }
            by_id
                .get(r.caption_id.as_str())
                .map(|t| (r, *t))
                .ok_or_else(|| Error::Input(format!("no ground truth for {}", r.caption_id)))
        })
        .collect()
}

fn ratio(num: usize, den: usize, what: &str) -> Result<f64> {
    if den == 0 {
        return Err(Error::UndefinedMetric(format!("no {what}")));
    }
    Ok(num as f64 / den as f64)
}

/// Object-level and sentence-level hallucination rates.
///
/// A mention is hallucinated when it is not annotated for its caption; a
/// sentence is hallucinated when it has at least one such mention.
pub fn chair_scores(
    records: &[CaptionRecord],
    truths: &[GroundTruth],
    convention: ChairConvention,
    pooling: Pooling,
) -> Result<ChairScores> {
    let pairs = pair(records, truths)?;
    let mut per_caption = Vec::with_capacity(pairs.len());
    let (mut bad_mentions, mut mentions, mut bad_sentences, mut sentences) = (0, 0, 0, 0);
    for (record, truth) in pairs {
        let (mut cb, mut cm, mut sb) = (0, 0, 0);
        for sentence in &record.sentences {
            let bad = sentence
                .iter()
                .filter(|o| !truth.annotated_objects.contains(o.as_str()))
                .count();
            cb += bad;
            cm += sentence.len();
            sb += usize::from(bad > 0);
        }
        per_caption.push((cb, cm, sb, record.sentences.len()));
        bad_mentions += cb;
        mentions += cm;
        bad_sentences += sb;
        sentences += record.sentences.len();
    }
    let (objects, sents) = match pooling {
        Pooling::Corpus => (
            ratio(bad_mentions, mentions, "object mentions")?,
            ratio(bad_sentences, sentences, "sentences")?,
        ),
        Pooling::PerCaption => {
            let n = per_caption.len();
            let mut o = 0.0;
            let mut s = 0.0;
            for &(cb, cm, sb, sn) in &per_caption {
                o += ratio(cb, cm, "object mentions in a caption")?;
                s += ratio(sb, sn, "sentences in a caption")?;
            }
            (o / n as f64, s / n as f64)
        }
    };
    Ok(match convention {
        ChairConvention::Standard => ChairScores {
            chairs: objects,
            chairi: sents,
        },
        ChairConvention::Original => ChairScores {
            chairs: sents,
            chairi: objects,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmberScores {
    pub chair: f64,
    pub cover: f64,
    pub hal: f64,
    pub cog: f64,
    /// Captions with no generated objects; their CHAIR and Cog count as 0.
    pub empty_captions: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmberCaption {
    pub chair: f64,
    pub cover: f64,
    pub cog: f64,
}

/// Per-caption AMBER values for generated objects `generated`.
pub fn amber_caption(generated: &[String], truth: &GroundTruth) -> AmberCaption {
    let unique: HashSet<&str> = generated.iter().map(String::as_str).collect();
    let hits = unique
        .iter()
        .filter(|o| truth.annotated_objects.contains(**o))
        .count();
    let targets = unique
        .iter()
        .filter(|o| truth.hallucination_targets.contains(**o))
        .count();
    let n = unique.len() as f64;
    AmberCaption {
        chair: if unique.is_empty() {
            0.0
        } else {
            1.0 - hits as f64 / n
        },
        cover: hits as f64 / truth.annotated_objects.len() as f64,
        cog: if unique.is_empty() {
            0.0
        } else {
            targets as f64 / n
        },
    }
}

/// Corpus means of CHAIR, Cover and Cog, and the share of captions with
/// nonzero CHAIR.
pub fn amber_scores(records: &[CaptionRecord], truths: &[GroundTruth]) -> Result<AmberScores> {
    let pairs = pair(records, truths)?;
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("no captions".into()));
    }
    let n = pairs.len() as f64;
    let mut sums = (0.0, 0.0, 0.0, 0usize);
    let mut empty_captions = Vec::new();
    for (record, truth) in pairs {
        if record.objects.is_empty() {
            empty_captions.push(record.caption_id.clone());
        }
        let c = amber_caption(&record.objects, truth);
        sums.0 += c.chair;
        sums.1 += c.cover;
        sums.2 += c.cog;
        sums.3 += usize::from(c.chair > 0.0);
    }
    Ok(AmberScores {
        chair: sums.0 / n,
        cover: sums.1 / n,
        hal: sums.3 as f64 / n,
        cog: sums.2 / n,
        empty_captions,
    })
}

/// F1 over exact set matches. Two empty sets score 1.
///
/// Computed as `2|P ∩ G| / (|P| + |G|)`, the harmonic mean of precision and
/// recall with a single rounding.
pub fn f1_exact<T: Eq + Hash>(pred: &HashSet<T>, gold: &HashSet<T>) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let hits = pred.intersection(gold).count();
    (2 * hits) as f64 / (pred.len() + gold.len()) as f64
}

pub const CAPTURE_WEIGHTS: (f64, f64, f64) = (5.0, 5.0, 2.0);

/// Weighted mean of entity, attribute and relation F1 with weights 5, 5, 2.
pub fn capture(f1_obj: f64, f1_attr: f64, f1_rel: f64) -> Result<f64> {
    for (name, v) in [("f1_obj", f1_obj), ("f1_attr", f1_attr), ("f1_rel", f1_rel)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Input(format!("{name} = {v} outside [0, 1]")));
        }
    }
    let (a, b, c) = CAPTURE_WEIGHTS;
    Ok((a * f1_obj + b * f1_attr + c * f1_rel) / (a + b + c))
}

/// Predicted or reference scene-graph pieces of one caption.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneSets {
    #[serde(default)]
    pub entities: BTreeSet<String>,
    #[serde(default)]
    pub attributes: BTreeSet<String>,
    /// `(subject, predicate, object)` triples.
    #[serde(default)]
    pub relations: BTreeSet<(String, String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureSets {
    pub caption_id: String,
    pub predicted: SceneSets,
    pub gold: SceneSets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureReport {
    pub f1_obj: f64,
    pub f1_attr: f64,
    pub f1_rel: f64,
    pub capture: f64,
    pub captions: usize,
}

fn lower_set(s: &BTreeSet<String>) -> HashSet<String> {
    s.iter().map(|v| v.to_lowercase()).collect()
}

/// Mean per-caption F1 for each aspect and their CAPTURE combination.
pub fn capture_corpus(items: &[CaptureSets]) -> Result<CaptureReport> {
    if items.is_empty() {
        return Err(Error::UndefinedMetric("no captions".into()));
    }
    let n = items.len() as f64;
    let (mut obj, mut attr, mut rel) = (0.0, 0.0, 0.0);
    for item in items {
        obj += f1_exact(
            &lower_set(&item.predicted.entities),
            &lower_set(&item.gold.entities),
        );
        attr += f1_exact(
            &lower_set(&item.predicted.attributes),
            &lower_set(&item.gold.attributes),
        );
        let triples = |s: &SceneSets| -> HashSet<(String, String, String)> {
            s.relations
                .iter()
                .map(|(a, b, c)| (a.to_lowercase(), b.to_lowercase(), c.to_lowercase()))
                .collect()
        };
        rel += f1_exact(&triples(&item.predicted), &triples(&item.gold));
    }
    let (f1_obj, f1_attr, f1_rel) = (obj / n, attr / n, rel / n);
    Ok(CaptureReport {
        f1_obj,
        f1_attr,
        f1_rel,
        capture: capture(f1_obj, f1_attr, f1_rel)?,
        captions: items.len(),
    })
}

/// `R - Cs - Ci` and `2R - Cs - Ci`, all in percent.
pub fn composite_scores(recall: f64, chairs: f64, chairi: f64) -> (f64, f64) {
    (recall - chairs - chairi, 2.0 * recall - chairs - chairi)
}

/// Pooled object recall: annotated objects mentioned over annotated objects.
pub fn object_recall(records: &[CaptionRecord], truths: &[GroundTruth]) -> Result<f64> {
    let pairs = pair(records, truths)?;
    let (mut hits, mut total) = (0, 0);
    for (record, truth) in pairs {
        let generated: HashSet<&str> = record.objects.iter().map(String::as_str).collect();
        hits += truth
            .annotated_objects
            .iter()
            .filter(|o| generated.contains(o.as_str()))
            .count();
        total += truth.annotated_objects.len();
    }
    ratio(hits, total, "annotated objects")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[&str]) -> HashSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn truth(id: &str, annotated: &[&str], targets: &[&str]) -> GroundTruth {
        GroundTruth {
            caption_id: id.into(),
            annotated_objects: annotated.iter().map(|s| s.to_string()).collect(),
            hallucination_targets: targets.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn record(id: &str, sentences: &[&[&str]]) -> CaptionRecord {
        CaptionRecord {
            caption_id: id.into(),
            objects: vec![],
            sentences: sentences
                .iter()
                .map(|s| s.iter().map(|o| o.to_string()).collect())
                .collect(),
        }
        .normalized()
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1_exact(&set(&["a", "b"]), &set(&["a", "b"])), 1.0);
        assert_eq!(f1_exact(&set(&["a"]), &set(&["b"])), 0.0);
        assert!((f1_exact(&set(&["a", "b"]), &set(&["b", "c", "d"])) - 0.4).abs() < 1e-15);
        assert_eq!(f1_exact(&set(&[]), &set(&[])), 1.0);
        assert_eq!(f1_exact(&set(&[]), &set(&["a"])), 0.0);
    }

    #[test]
    fn capture_weights() {
        assert_eq!(capture(1.0, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(capture(0.0, 0.0, 0.0).unwrap(), 0.0);
        assert!((capture(0.6, 0.4, 0.2).unwrap() - 0.45).abs() < 1e-15);
        assert!(capture(1.2, 0.0, 0.0).is_err());
    }

    #[test]
    fn amber_hand_case() {
        let t = truth("c", &["a", "b", "c", "d", "e"], &["x"]);
        let gen: Vec<String> = ["a", "b", "c", "x"].iter().map(|s| s.to_string()).collect();
        let c = amber_caption(&gen, &t);
        assert_eq!((c.chair, c.cover, c.cog), (0.25, 0.6, 0.25));
    }

    #[test]
    fn convention_swaps_labels() {
        let records = vec![record("1", &[&["a", "x"], &["a"]])];
        let truths = vec![truth("1", &["a"], &[])];
        let standard =
            chair_scores(&records, &truths, ChairConvention::Standard, Pooling::Corpus).unwrap();
        let original = chair_scores(
            &records,
            &truths,
            ChairConvention::Original,
            Pooling::Corpus,
        )
        .unwrap();
        assert_eq!((standard.chairs, standard.chairi), (1.0 / 3.0, 0.5));
        assert_eq!((original.chairs, original.chairi), (0.5, 1.0 / 3.0));
    }

    #[test]
    fn per_caption_pooling_averages_ratios() {
        let records = vec![record("1", &[&["x"]]), record("2", &[&["a", "a", "a"]])];
        let truths = vec![truth("1", &["a"], &[]), truth("2", &["a"], &[])];
        let pooled =
            chair_scores(&records, &truths, ChairConvention::Standard, Pooling::Corpus).unwrap();
        let averaged = chair_scores(
            &records,
            &truths,
            ChairConvention::Standard,
            Pooling::PerCaption,
        )
        .unwrap();
        assert_eq!(pooled.chairs, 0.25);
        assert_eq!(averaged.chairs, 0.5);
    }

    #[test]
    fn id_mismatch_and_empty_corpus() {
        let records = vec![record("1", &[&["a"]])];
        let truths = vec![truth("2", &["a"], &[])];
        assert!(matches!(
            chair_scores(&records, &truths, ChairConvention::Standard, Pooling::Corpus),
            Err(Error::Input(_))
        ));
        let silent = vec![record("1", &[])];
        let t1 = vec![truth("1", &["a"], &[])];
        assert!(matches!(
            chair_scores(&silent, &t1, ChairConvention::Standard, Pooling::Corpus),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn normalization_lowercases_and_collects_mentions() {
        let r = CaptionRecord {
            caption_id: "1".into(),
            objects: vec!["Dog".into(), "dog".into()],
            sentences: vec![vec!["CAT".into()]],
        }
        .normalized();
        assert_eq!(r.objects, vec!["dog".to_string(), "cat".to_string()]);
        assert_eq!(r.sentences, vec![vec!["cat".to_string()]]);
    }

    #[test]
    fn composites() {
        let (a, b) = composite_scores(56.9, 17.8, 5.5);
        assert_eq!(
            (format!("{a:.1}"), format!("{b:.1}")),
            ("33.6".into(), "90.5".into())
        );
        assert_eq!(composite_scores(0.0, 0.0, 0.0), (0.0, 0.0));
    }
}
