//! Rule-driven stand-ins for the model roles over a synthetic world.
//!
//! The interpreter "sees" a patch by resolving its image id to the stored
//! embedding and naming the nearest concept; in-context answers get less
//! noisy as more reference images are supplied. The reasoner follows a
//! fixed renal work-up (differential from findings, a four-marker panel,
//! the subtype and grading tools) and scores candidates against whatever
//! evidence comes back. The exam oracle reads results from case truth.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::{
    description_concept, diagnosis_name, rcc_profile, stable_hash, CaseTruth, ConceptBank,
    BACKGROUND, GRADES, LESIONS, RCC_PANEL, RCC_SUBTYPES,
};
use crate::backends::{Backend, BackendError, BackendRequest, BackendResponse, Role};
use crate::parser::parse_response;
use crate::reward::{exam_tokens, normalize};
use crate::store::CorpusHandle;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    /// Chance the screening read names the runner-up lesion.
    pub screen_error: f64,
    /// In-context error rate is `icl_floor + icl_span / (1 + references)`.
    pub icl_floor: f64,
    pub icl_span: f64,
    /// Share of query images that must show a concept for a "yes".
    pub vote_share: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            screen_error: 0.2,
            icl_floor: 0.04,
            icl_span: 0.26,
            vote_share: 0.4,
        }
    }
}

fn lesion_phrase(concept: &str) -> &'static str {
    match concept {
        "ccRCC" => "nests of polygonal cells with optically clear cytoplasm in a delicate capillary network",
        "chRCC" => "solid sheets of large pale cells with thick cell membranes and perinuclear clearing",
        "pRCC" => "papillary fronds lined by cuboidal cells over fibrovascular cores with foamy macrophages",
        "gastric-adenocarcinoma" => "irregular infiltrating glands with cribriform areas in a desmoplastic stroma",
        "thymic-carcinoma" => "cohesive sheets of atypical epithelial cells separated by fibrous bands",
        "gleason-3" => "discrete well-formed small glands infiltrating between benign glands",
        "gleason-4" => "fused and cribriform glands with poorly formed lumina",
        "gleason-5" => "solid sheets and single cells without gland formation",
        _ => "",
    }
}

fn grade_phrase(grade: &str) -> &'static str {
    match grade {
        "G1" => "small round nuclei without visible nucleoli",
        "G2" => "finely granular chromatin with nucleoli visible only at high power",
        "G3" => "nucleoli conspicuous at low power",
        "G4" => "marked nuclear pleomorphism with bizarre multilobated nuclei",
        _ => "",
    }
}

fn background_phrase(concept: &str) -> &'static str {
    match concept {
        "normal-kidney" => "residual renal tubules and glomeruli",
        "normal-gastric" => "residual gastric mucosa",
        "normal-prostate" => "benign prostatic glands",
        "stroma" => "fibrous stroma",
        "lymphoid" => "lymphoid aggregates",
        "vessel" => "thin-walled vessels",
        "nerve" => "peripheral nerve twigs",
        _ => "",
    }
}

const RENAL_TOOLS: [&str; 4] = ["tool-ccRCC", "tool-chRCC", "tool-pRCC", "tool-Nuclear"];

/// One backend answering every role except the judge.
pub struct SimulatedBackend {
    corpus: Arc<CorpusHandle>,
    bank: ConceptBank,
    truths: BTreeMap<String, CaseTruth>,
    config: SimConfig,
}

fn tally<'a>(items: impl IntoIterator<Item = &'a str>, order: &[&'a str]) -> Vec<(&'a str, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for i in items {
        *counts.entry(i).or_default() += 1;
    }
    let mut out: Vec<(&str, usize)> = order
        .iter()
        .filter_map(|c| counts.get(c).map(|n| (*c, *n)))
        .collect();
    // stable: ties keep the canonical order
    out.sort_by(|a, b| b.1.cmp(&a.1));
    out
}

impl SimulatedBackend {
    /// `truths` is keyed by the exact case information text.
    pub fn new(
        corpus: Arc<CorpusHandle>,
        bank: ConceptBank,
        truths: impl IntoIterator<Item = (String, CaseTruth)>,
        config: SimConfig,
    ) -> Self {
        Self {
            corpus,
            bank,
            truths: truths.into_iter().collect(),
            config,
        }
    }

    fn coin(&self, parts: &[&str], p: f64) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ stable_hash(parts));
        rng.random_bool(p.clamp(0.0, 1.0))
    }

    fn embeddings<'a>(&'a self, ids: &'a [String]) -> impl Iterator<Item = &'a [f32]> + 'a {
        ids.iter().filter_map(|id| self.corpus.resolve(id))
    }

    fn findings(&self, req: &BackendRequest) -> String {
        let mut among: Vec<&str> = LESIONS.to_vec();
        among.extend(BACKGROUND);
        let seen: Vec<&str> = self
            .embeddings(&req.images)
            .filter_map(|e| self.bank.nearest(e, &among))
            .collect();
        let lesions = tally(seen.iter().copied().filter(|c| LESIONS.contains(c)), &LESIONS);
        let backgrounds = tally(seen.iter().copied().filter(|c| BACKGROUND.contains(c)), &BACKGROUND);
        let background = backgrounds
            .first()
            .map_or("unremarkable tissue", |(c, _)| background_phrase(c));
        let Some(&(top, _)) = lesions.first() else {
            return format!(
                "No definite tumor was identified in the sampled regions.\nBackground: {background}."
            );
        };
        let key = req.images.join("|");
        let mut lesion = top;
        if self.coin(&[&key, "screen"], self.config.screen_error) {
            lesion = match lesions.get(1) {
                Some(&(second, _)) => second,
                None if RCC_SUBTYPES.contains(&top) => {
                    let i = RCC_SUBTYPES.iter().position(|s| *s == top).unwrap_or(0);
                    RCC_SUBTYPES[(i + 1) % 3]
                }
                None => top,
            };
        }
        let mut text = format!("Overall tissue structure: {}.", lesion_phrase(lesion));
        if RCC_SUBTYPES.contains(&lesion) {
            let grades = tally(
                self.embeddings(&req.images)
                    .filter(|e| {
                        self.bank
                            .nearest(e, &among)
                            .is_some_and(|c| RCC_SUBTYPES.contains(&c))
                    })
                    .filter_map(|e| self.bank.nearest(e, &GRADES)),
                &GRADES,
            );
            if let Some((g, _)) = grades.first() {
                text.push_str(&format!("\nCellular features: {}.", grade_phrase(g)));
            }
        }
        text.push_str(&format!("\nBackground: {background}."));
        text
    }

    fn icl_answer(&self, req: &BackendRequest, description: &str) -> String {
        let Some((target, family)) = description_concept(description) else {
            return "Unable to compare: unknown reference description.".into();
        };
        let mut among = family;
        for b in BACKGROUND {
            if !among.contains(&b) {
                among.push(b);
            }
        }
        let hits: Vec<bool> = self
            .embeddings(&req.images)
            .map(|e| self.bank.nearest(e, &among) == Some(target))
            .collect();
        let n = hits.iter().filter(|h| **h).count();
        let mut yes = n > 0 && n as f64 >= self.config.vote_share * hits.len() as f64;
        let error =
            self.config.icl_floor + self.config.icl_span / (1.0 + req.references.len() as f64);
        if self.coin(&[&req.images.join("|"), description, "icl"], error) {
            yes = !yes;
        }
        if yes {
            "Yes. The query regions share the morphology of the reference images.".into()
        } else {
            "No. The query regions differ from the reference images.".into()
        }
    }

    fn interpret(&self, req: &BackendRequest) -> String {
        match req.metadata.get("description").and_then(Value::as_str) {
            Some(d) => self.icl_answer(req, d),
            None => self.findings(req),
        }
    }

    fn examine(&self, req: &BackendRequest) -> String {
        let case = req
            .metadata
            .get("case_info")
            .and_then(Value::as_str)
            .unwrap_or("");
        let truth = self.truths.get(case);
        let mut lines = Vec::new();
        for item in req.exams() {
            let tokens = exam_tokens(&item);
            let found: Vec<(&String, &String)> = truth
                .map(|t| {
                    t.exams
                        .iter()
                        .filter(|(name, _)| tokens.contains(&normalize(name)))
                        .collect()
                })
                .unwrap_or_default();
            if found.is_empty() {
                lines.push(format!("{item}: not available"));
            }
            for (name, result) in found {
                lines.push(format!("{name}: {result}"));
            }
        }
        lines.join("\n")
    }

    fn reason(&self, req: &BackendRequest) -> String {
        let prompt = req.prompt.as_str();
        if prompt.contains("Results of Further Examinations:") {
            return self.conclude(req);
        }
        let one_pass = prompt.contains("no further examinations or observations");
        let read = Reading::from_prompt(prompt);
        if one_pass || !read.renal {
            let name = read.boxed_name();
            return answer(
                &format!("The findings are most in keeping with {name}."),
                &format!("\\boxed{{{name}}}"),
            );
        }
        let diff: Vec<&str> = read
            .ranked_subtypes()
            .into_iter()
            .filter_map(diagnosis_name)
            .collect();
        let tools: Vec<&str> = RENAL_TOOLS
            .iter()
            .copied()
            .filter(|t| prompt.contains(&format!("({t})")))
            .collect();
        let think = format!(
            "Renal tumour; morphology favours {}. A marker panel and the subtype and grading tools will separate the candidates.",
            diff[0]
        );
        answer(
            &think,
            &format!(
                "\\DiffList{{{}}}\n\\ExamList{{Immunohistochemistry ({})}}\n\\ToolCallList{{{}}}",
                diff.join(", "),
                RCC_PANEL.join(", "),
                tools.join(", ")
            ),
        )
    }

    fn conclude(&self, req: &BackendRequest) -> String {
        let history: Vec<&Value> = req
            .metadata
            .get("history")
            .and_then(Value::as_array)
            .map(|h| h.iter().collect())
            .unwrap_or_default();
        let first_user = history
            .iter()
            .find(|m| m.get("role").and_then(Value::as_str) == Some("user"))
            .and_then(|m| m.get("content").and_then(Value::as_str))
            .unwrap_or("");
        let last_answer = history
            .iter()
            .rev()
            .find(|m| m.get("role").and_then(Value::as_str) == Some("assistant"))
            .and_then(|m| m.get("content").and_then(Value::as_str))
            .map(parse_response)
            .unwrap_or_default();
        let read = Reading::from_prompt(first_user);
        let (exams, observations) = evidence_sections(&req.prompt);

        let mut scores: BTreeMap<&str, f64> = BTreeMap::new();
        for (rank, d) in last_answer.diffs().iter().enumerate() {
            if let Some(s) = RCC_SUBTYPES
                .iter()
                .find(|s| diagnosis_name(s) == Some(d.as_str()))
            {
                *scores.entry(s).or_default() += 1.0 / (1.0 + rank as f64);
            }
        }
        for s in RCC_SUBTYPES {
            let entry = scores.entry(s).or_default();
            let profile = rcc_profile(s).expect("renal subtype");
            for (marker, expected) in RCC_PANEL.iter().zip(profile) {
                if let Some(result) = exams.get(&normalize(marker)) {
                    *entry += if result.contains(expected) { 1.5 } else { -1.5 };
                }
            }
            match observations.get(&normalize(s)).map(String::as_str) {
                Some("positive") => *entry += 2.0,
                Some("negative") => *entry -= 1.0,
                _ => {}
            }
        }
        let best = RCC_SUBTYPES
            .iter()
            .copied()
            .max_by(|a, b| scores[a].total_cmp(&scores[b]).then(b.cmp(a)))
            .expect("three subtypes");
        let grade = observations
            .get("nuclear grade")
            .and_then(|g| g.parse::<u8>().ok())
            .or(read.grade);
        let mut name = diagnosis_name(best).expect("renal subtype").to_string();
        if let Some(g) = grade {
            name.push_str(&format!(", nuclear grade {g}"));
        }
        answer(
            &format!("Weighing the differential against the returned evidence favours {name}."),
            &format!("\\boxed{{{name}}}"),
        )
    }
}

fn answer(think: &str, body: &str) -> String {
    format!("<think>\n{think}\n</think>\n<answer>\n{body}\n</answer>")
}

/// `name: result` pairs of the two evidence sections of a definitive prompt,
/// keyed by normalized name.
fn evidence_sections(prompt: &str) -> (BTreeMap<String, String>, BTreeMap<String, String>) {
    let exam_start = prompt.find("Results of Further Examinations:");
    let obs_start = prompt.find("Results of Further Observations:");
    let pairs = |text: &str| -> BTreeMap<String, String> {
        text.lines()
            .filter_map(|l| l.split_once(':'))
            .map(|(k, v)| (normalize(k), normalize(v)))
            .collect()
    };
    match (exam_start, obs_start) {
        (Some(e), Some(o)) if e < o => {
            let exams = &prompt[e + "Results of Further Examinations:".len()..o];
            let obs = &prompt[o + "Results of Further Observations:".len()..];
            (pairs(exams), pairs(obs))
        }
        _ => (BTreeMap::new(), BTreeMap::new()),
    }
}

/// What the reasoner takes from case information and screening findings.
struct Reading {
    renal: bool,
    lesion: Option<&'static str>,
    grade: Option<u8>,
}

impl Reading {
    fn from_prompt(prompt: &str) -> Self {
        let lesion = LESIONS
            .iter()
            .copied()
            .find(|l| prompt.contains(lesion_phrase(l)));
        let grade = GRADES
            .iter()
            .position(|g| prompt.contains(grade_phrase(g)))
            .map(|i| i as u8 + 1);
        Self {
            renal: prompt.contains("kidney"),
            lesion,
            grade,
        }
    }

    fn ranked_subtypes(&self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        if let Some(l) = self.lesion.filter(|l| RCC_SUBTYPES.contains(l)) {
            out.push(l);
        }
        for s in RCC_SUBTYPES {
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out
    }

    fn boxed_name(&self) -> String {
        let lesion = if self.renal {
            self.ranked_subtypes()[0]
        } else {
            match self.lesion {
                Some(l) => l,
                None => return "Malignant neoplasm".into(),
            }
        };
        let mut name = diagnosis_name(lesion).unwrap_or("Malignant neoplasm").to_string();
        if let (true, Some(g)) = (self.renal, self.grade) {
            name.push_str(&format!(", nuclear grade {g}"));
        }
        name
    }
}

impl Backend for SimulatedBackend {
    fn call(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        req.validate()?;
        let text = match req.role {
            Role::Interpreter => self.interpret(req),
            Role::Reasoner => self.reason(req),
            Role::ExamOracle => self.examine(req),
            Role::Judge => {
                return Err(BackendError::Rejected {
                    role: Role::Judge,
                    status: 501,
                    body: "the simulated world has no judge; use the rule-based judge".into(),
                })
            }
        };
        Ok(BackendResponse {
            text,
            usage: json!({"simulated": true}),
        })
    }
}
