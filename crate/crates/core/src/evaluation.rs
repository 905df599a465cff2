//! QA scoring with the challenge composite `R/3 + G` and 1–5 rubric scoring
//! of generated articles.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::gateway::{bindings, complete_prompt, ChatProvider, TemplateCatalog};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChallengeScore {
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "G")]
    pub g: f64,
    pub total: f64,
}

/// `total = R/3 + G`, both inputs in [0, 100].
pub fn score_challenge(r: f64, g: f64) -> Result<ChallengeScore> {
    for (name, v) in [("R", r), ("G", g)] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::Range(format!("{name} = {v} outside [0, 100]")));
        }
    }
    Ok(ChallengeScore { r, g, total: r / 3.0 + g })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerKind {
    Number,
    Name,
    Boolean,
    Names,
}

impl AnswerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnswerKind::Number => "number",
            AnswerKind::Name => "name",
            AnswerKind::Boolean => "boolean",
            AnswerKind::Names => "names",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QARecord {
    pub question: String,
    pub gold_answer: String,
    pub answer_kind: AnswerKind,
    #[serde(default)]
    pub gold_chunk_ids: Vec<String>,
}

/// One question's pipeline output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QARun {
    pub question: String,
    pub answer: String,
    pub retrieved_chunk_ids: Vec<String>,
}

pub fn read_qa_dataset(path: &Path) -> Result<Vec<QARecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: QARecord = serde_json::from_str(line)
            .map_err(|e| Error::MalformedInput(format!("dataset line {}: {e}", n + 1)))?;
        if rec.gold_answer.trim().is_empty() {
            return Err(Error::MalformedInput(format!("dataset line {}: empty gold_answer", n + 1)));
        }
        out.push(rec);
    }
    Ok(out)
}

fn check_alignment(runs: &[QARun], gold: &[QARecord]) -> Result<()> {
    if runs.len() != gold.len() {
        return Err(Error::MisalignedRun(format!("{} runs for {} questions", runs.len(), gold.len())));
    }
    for (i, (r, g)) in runs.iter().zip(gold).enumerate() {
        if r.question != g.question {
            return Err(Error::MisalignedRun(format!("question {i} differs between run and gold")));
        }
    }
    Ok(())
}

/// Whether any gold chunk appears in the first `k` retrieved ids.
pub fn retrieval_hit(run: &QARun, gold: &QARecord, k: usize) -> bool {
    run.retrieved_chunk_ids
        .iter()
        .take(k)
        .any(|id| gold.gold_chunk_ids.contains(id))
}

/// `100 × mean(hit@k)`; 0 for an empty run.
pub fn compute_r(runs: &[QARun], gold: &[QARecord], k: usize) -> Result<f64> {
    check_alignment(runs, gold)?;
    if runs.is_empty() {
        return Ok(0.0);
    }
    let hits = runs.iter().zip(gold).filter(|(r, g)| retrieval_hit(r, g, k)).count();
    Ok(100.0 * hits as f64 / runs.len() as f64)
}

fn normalize_text(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c.to_ascii_lowercase() } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_number(s: &str) -> Option<f64> {
    let cleaned: String = s
        .trim()
        .trim_end_matches(['.', '%'])
        .chars()
        .filter(|c| !matches!(c, ',' | '$' | '€' | '£' | ' '))
        .collect();
    cleaned.parse().ok()
}

fn parse_bool(s: &str) -> Option<bool> {
    match normalize_text(s).as_str() {
        "yes" | "true" => Some(true),
        "no" | "false" => Some(false),
        _ => None,
    }
}

/// Exact match after normalization for the answer kind.
pub fn heuristic_match(kind: AnswerKind, gold: &str, answer: &str) -> bool {
    match kind {
        AnswerKind::Number => match (parse_number(gold), parse_number(answer)) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        },
        AnswerKind::Boolean => parse_bool(gold).is_some() && parse_bool(gold) == parse_bool(answer),
        AnswerKind::Name => normalize_text(gold) == normalize_text(answer),
        AnswerKind::Names => {
            let set = |s: &str| {
                let mut v: Vec<String> = s
                    .split([',', ';'])
                    .map(normalize_text)
                    .filter(|n| !n.is_empty())
                    .collect();
                v.sort();
                v.dedup();
                v
            };
            set(gold) == set(answer)
        }
    }
}

/// Per-question generation credit in {0, 0.5, 1}. Uses the judge prompt
/// when a provider is given and answers sensibly, otherwise exact match.
pub fn judge_answer(
    record: &QARecord,
    answer: &str,
    provider: Option<&dyn ChatProvider>,
    catalog: &TemplateCatalog,
) -> f64 {
    let heuristic = || if heuristic_match(record.answer_kind, &record.gold_answer, answer) { 1.0 } else { 0.0 };
    let Some(provider) = provider else {
        return heuristic();
    };
    let prompt = match catalog.render(
        "gen_judge",
        &bindings([
            ("question", record.question.clone()),
            ("answer_kind", record.answer_kind.as_str().to_string()),
            ("gold", record.gold_answer.clone()),
            ("answer", answer.to_string()),
        ]),
    ) {
        Ok(p) => p,
        Err(e) => {
            warn!(error = %e, "judge prompt unavailable; using exact match");
            return heuristic();
        }
    };
    #[derive(Deserialize)]
    struct Reply {
        score: f64,
    }
    let reply = match complete_prompt(provider, prompt) {
        Ok(r) => r,
        Err(e) => {
            warn!(error = %e, "answer judge unavailable; using exact match");
            return heuristic();
        }
    };
    let parsed = reply
        .find('{')
        .zip(reply.rfind('}'))
        .filter(|(s, e)| e > s)
        .and_then(|(s, e)| serde_json::from_str::<Reply>(&reply[s..=e]).ok());
    match parsed {
        Some(Reply { score }) if [0.0, 0.5, 1.0].contains(&score) => score,
        _ => {
            warn!("answer judge reply invalid; using exact match");
            heuristic()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRow {
    pub question: String,
    pub answer: String,
    pub retrieval_hit: bool,
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    pub rows: Vec<QaRow>,
    pub score: ChallengeScore,
}

impl QaReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("question\tretrieval_hit\tg\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                r.question.replace(['\t', '\n'], " "),
                u8::from(r.retrieval_hit),
                r.g
            ));
        }
        out.push_str(&format!(
            "\nR\tG\ttotal\n{:.2}\t{:.2}\t{:.2}\n",
            self.score.r, self.score.g, self.score.total
        ));
        out
    }
}

/// Score aligned runs: R from hit@k, G from the judge.
pub fn evaluate_qa(
    runs: &[QARun],
    gold: &[QARecord],
    k: usize,
    provider: Option<&dyn ChatProvider>,
    catalog: &TemplateCatalog,
) -> Result<QaReport> {
    let r = compute_r(runs, gold, k)?;
    let rows: Vec<QaRow> = runs
        .iter()
        .zip(gold)
        .map(|(run, rec)| QaRow {
            question: run.question.clone(),
            answer: run.answer.clone(),
            retrieval_hit: retrieval_hit(run, rec, k),
            g: judge_answer(rec, &run.answer, provider, catalog),
        })
        .collect();
    let g = if rows.is_empty() {
        0.0
    } else {
        100.0 * rows.iter().map(|r| r.g).sum::<f64>() / rows.len() as f64
    };
    Ok(QaReport {
        rows,
        score: score_challenge(r, g)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RubricScore {
    pub interest: u8,
    pub coherence: u8,
    pub relevance: u8,
    pub coverage: u8,
    pub average: f64,
}

impl RubricScore {
    pub fn new(interest: u8, coherence: u8, relevance: u8, coverage: u8) -> Self {
        let average = (interest as f64 + coherence as f64 + relevance as f64 + coverage as f64) / 4.0;
        RubricScore {
            interest,
            coherence,
            relevance,
            coverage,
            average,
        }
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "interest\tcoherence\trelevance\tcoverage\taverage\n{}\t{}\t{}\t{}\t{:.2}\n",
            self.interest, self.coherence, self.relevance, self.coverage, self.average
        )
    }
}

/// (dimension, criterion) pairs in report order.
pub const RUBRIC_DIMENSIONS: [(&str, &str); 4] = [
    ("Interest Level", "Does the article engage the reader with informative, specific content?"),
    ("Coherence and Organization", "Is the article well structured, with a logical flow between sections?"),
    ("Relevance and Focus", "Does the article stay on the request without digressions?"),
    ("Broad Coverage", "Does the article cover the main aspects of the request?"),
];

fn parse_rating(reply: &str) -> Option<i64> {
    let start = reply.find(|c: char| c.is_ascii_digit() || c == '-')?;
    let digits: String = reply[start..]
        .chars()
        .enumerate()
        .take_while(|(i, c)| c.is_ascii_digit() || (*i == 0 && *c == '-'))
        .map(|(_, c)| c)
        .collect();
    digits.parse().ok()
}

pub fn rubric_score(
    article: &str,
    query: &str,
    provider: &dyn ChatProvider,
    catalog: &TemplateCatalog,
) -> Result<RubricScore> {
    if article.trim().is_empty() {
        return Err(Error::invalid_request("article", "article must be nonempty"));
    }
    let mut scores = [0u8; 4];
    for (slot, (dimension, criterion)) in scores.iter_mut().zip(RUBRIC_DIMENSIONS) {
        let prompt = catalog.render(
            "rubric_judge",
            &bindings([
                ("dimension", dimension.to_string()),
                ("criterion", criterion.to_string()),
                ("query", query.to_string()),
                ("article", article.to_string()),
            ]),
        )?;
        let reply = complete_prompt(provider, prompt)?;
        let raw = parse_rating(&reply)
            .ok_or_else(|| Error::Parse(format!("no rating in reply for {dimension}")))?;
        let clipped = raw.clamp(1, 5);
        if clipped != raw {
            warn!(dimension, raw, "rating outside 1..=5; clipped");
        }
        *slot = clipped as u8;
    }
    Ok(RubricScore::new(scores[0], scores[1], scores[2], scores[3]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedProvider;

    #[test]
    fn formula_values() {
        assert!((score_challenge(100.0, 100.0).unwrap().total - 133.333_333_333).abs() < 1e-6);
        assert_eq!(score_challenge(0.0, 0.0).unwrap().total, 0.0);
        assert!((score_challenge(78.3, 73.8).unwrap().total - 99.9).abs() < 1e-9);
        assert!(matches!(score_challenge(101.0, 0.0), Err(Error::Range(_))));
        assert!(score_challenge(f64::NAN, 0.0).is_err());
    }

    fn rec(q: &str, gold: &[&str]) -> QARecord {
        QARecord {
            question: q.into(),
            gold_answer: "x".into(),
            answer_kind: AnswerKind::Name,
            gold_chunk_ids: gold.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn run(q: &str, got: &[&str]) -> QARun {
        QARun {
            question: q.into(),
            answer: String::new(),
            retrieved_chunk_ids: got.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn r_counts_hits() {
        let gold = vec![rec("a", &["1"]), rec("b", &["2"]), rec("c", &["3"]), rec("d", &["4"])];
        let runs = vec![run("a", &["1"]), run("b", &["9", "2"]), run("c", &["3"]), run("d", &["5"])];
        assert_eq!(compute_r(&runs, &gold, 8).unwrap(), 75.0);
        assert_eq!(compute_r(&runs, &gold, 1).unwrap(), 50.0);
        assert!(matches!(compute_r(&runs[..3], &gold, 8), Err(Error::MisalignedRun(_))));
    }

    #[test]
    fn heuristic_judging() {
        assert!(heuristic_match(AnswerKind::Boolean, "yes", "Yes."));
        assert!(!heuristic_match(AnswerKind::Number, "42", "41"));
        assert!(heuristic_match(AnswerKind::Number, "1,200", "1200"));
        assert!(heuristic_match(AnswerKind::Names, "Ann, Bo", "bo; ann"));
    }

    #[test]
    fn scripted_judge_half_credit() {
        let catalog = TemplateCatalog::default();
        let r = QARecord {
            question: "q".into(),
            gold_answer: "Z".into(),
            answer_kind: AnswerKind::Name,
            gold_chunk_ids: vec![],
        };
        let prompt = catalog
            .render(
                "gen_judge",
                &bindings([
                    ("question", "q".into()),
                    ("answer_kind", "name".into()),
                    ("gold", "Z".into()),
                    ("answer", "maybe Z".into()),
                ]),
            )
            .unwrap();
        let mut p = ScriptedProvider::default();
        p.insert_prompt(prompt, r#"{"score": 0.5}"#);
        assert_eq!(judge_answer(&r, "maybe Z", Some(&p), &catalog), 0.5);
    }

    fn rubric_with(replies: [&str; 4]) -> RubricScore {
        let catalog = TemplateCatalog::default();
        let mut p = ScriptedProvider::default();
        for ((dimension, criterion), reply) in RUBRIC_DIMENSIONS.iter().zip(replies) {
            let prompt = catalog
                .render(
                    "rubric_judge",
                    &bindings([
                        ("dimension", dimension.to_string()),
                        ("criterion", criterion.to_string()),
                        ("query", "q".into()),
                        ("article", "# A".into()),
                    ]),
                )
                .unwrap();
            p.insert_prompt(prompt, reply);
        }
        rubric_score("# A", "q", &p, &catalog).unwrap()
    }

    #[test]
    fn rubric_average_and_clip() {
        assert_eq!(rubric_with(["5", "5", "5", "5"]).average, 5.0);
        assert_eq!(rubric_with(["4", "5", "5", "4"]).average, 4.5);
        let clipped = rubric_with(["7", "3", "3", "3"]);
        assert_eq!(clipped.interest, 5);
    }
}
