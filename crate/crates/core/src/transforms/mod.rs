//! Text transforms: formatting removal, LLM rewriting and thematic
//! categorization through a chat-completions endpoint.

pub mod client;

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use client::{
    ChatBackend, ChatClient, ChatClientConfig, ChatRequest, ChatResponse, CostCounters, HttpBackend, Message, MockBackend,
    CallError, MockLedger,
};

use crate::error::{Error, Result};

/// Bullet characters that open a list item.
pub const BULLETS: [&str; 4] = ["•", "-", "*", "–"];

/// List-item marker: a bullet, digits followed by `.` or `)`, or a single
/// letter followed by `)`.
pub fn is_list_marker(token: &str) -> bool {
    if BULLETS.contains(&token) {
        return true;
    }
    if let Some(head) = token.strip_suffix('.').or_else(|| token.strip_suffix(')')) {
        if !head.is_empty() && head.bytes().all(|b| b.is_ascii_digit()) {
            return true;
        }
    }
    if let Some(head) = token.strip_suffix(')') {
        let mut cs = head.chars();
        if let (Some(c), None) = (cs.next(), cs.next()) {
            return c.is_alphabetic();
        }
    }
    false
}

fn ends_sentence(token: &str) -> bool {
    token.ends_with(['.', '!', '?', ':'])
}

/// Collapse a text into one continuous block. Line breaks, tabs and
/// carriage returns go away, list markers at the start of a line or a
/// sentence are dropped, and whitespace runs become one space. Punctuation
/// inside sentences is kept. Idempotent.
pub fn strip_formatting(text: &str) -> String {
    let mut out: Vec<&str> = Vec::new();
    for line in text.split(['\n', '\r']) {
        let mut at_start = true;
        for tok in line.split_whitespace() {
            let mut tok = tok;
            if at_start {
                if is_list_marker(tok) {
                    continue;
                }
                tok = tok.trim_start_matches('•');
                if tok.is_empty() || is_list_marker(tok) {
                    continue;
                }
            }
            at_start = ends_sentence(tok);
            out.push(tok);
        }
    }
    out.join(" ")
}

/// The three rewrite instructions, from least to most invasive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RewritePrompt {
    P1 = 1,
    P2 = 2,
    P3 = 3,
}

impl RewritePrompt {
    pub const ALL: [RewritePrompt; 3] = [RewritePrompt::P1, RewritePrompt::P2, RewritePrompt::P3];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn template(self) -> &'static str {
        match self {
            RewritePrompt::P1 => "Rewrite the following text sentence by sentence while preserving its length and the accuracy of its content. Maintain the overall format, structure, and flow of the text:",
            RewritePrompt::P2 => "Rewrite the following text while preserving its length and the accuracy of its content:",
            RewritePrompt::P3 => "Rewrite the following text while preserving its length and the accuracy of its content. Do not use newlines, new paragraphs, itemization, enumeration, and other formatting, unless it is important or appropriate for better readability:",
        }
    }

    pub fn render(self, text: &str) -> String {
        format!("{}\n\n{}", self.template(), text)
    }
}

impl FromStr for RewritePrompt {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" => Ok(RewritePrompt::P1),
            "2" => Ok(RewritePrompt::P2),
            "3" => Ok(RewritePrompt::P3),
            _ => Err(Error::InvalidArgument(format!("rewrite prompt must be 1, 2 or 3, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Advertisement,
    HealthWellnessFitness,
    FoodNutrition,
    LifestyleRecreation,
    NewsMedia,
    Science,
    Technology,
    Education,
    BusinessFinance,
    PoliticsPolicy,
    ArtsEntertainment,
    SocietyCulture,
    Community,
    Other,
}

impl Category {
    pub const ALL: [Category; 14] = [
        Category::Advertisement,
        Category::HealthWellnessFitness,
        Category::FoodNutrition,
        Category::LifestyleRecreation,
        Category::NewsMedia,
        Category::Science,
        Category::Technology,
        Category::Education,
        Category::BusinessFinance,
        Category::PoliticsPolicy,
        Category::ArtsEntertainment,
        Category::SocietyCulture,
        Category::Community,
        Category::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Advertisement => "Advertisement",
            Category::HealthWellnessFitness => "Health,Wellness & Fitness",
            Category::FoodNutrition => "Food & Nutrition",
            Category::LifestyleRecreation => "Lifestyle & Recreation",
            Category::NewsMedia => "News & Media",
            Category::Science => "Science",
            Category::Technology => "Technology",
            Category::Education => "Education",
            Category::BusinessFinance => "Business & Finance",
            Category::PoliticsPolicy => "Politics & Policy",
            Category::ArtsEntertainment => "Arts & Entertainment",
            Category::SocietyCulture => "Society & Culture",
            Category::Community => "Community",
            Category::Other => "Other",
        }
    }

    /// Match a model answer against the closed set, ignoring case,
    /// whitespace and punctuation other than `&`.
    pub fn parse(answer: &str) -> Option<Category> {
        let norm = |s: &str| -> String {
            s.chars()
                .filter(|c| c.is_alphanumeric() || *c == '&')
                .flat_map(char::to_lowercase)
                .collect()
        };
        let a = norm(answer);
        Category::ALL.into_iter().find(|c| norm(c.name()) == a)
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Instruction used for categorization; the text follows it.
pub fn categorization_prompt() -> String {
    let names: Vec<&str> = Category::ALL.iter().map(|c| c.name()).collect();
    format!(
        "Assign the text below to exactly one of these categories: {}. \
         Use Other only when no listed category fits. \
         Reply with the category name and nothing else.",
        names.join("; ")
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryOutcome {
    pub category: Category,
    /// No parseable answer after one retry; mapped to Other.
    pub flagged: bool,
    pub raw: String,
}

pub fn rewrite(text: &str, prompt: RewritePrompt, client: &ChatClient) -> Result<String> {
    let r = client.complete(&format!("rewrite-{}", prompt.id()), &prompt.render(text))?;
    if r.text.trim().is_empty() {
        return Err(Error::Endpoint("empty rewrite response".into()));
    }
    Ok(r.text)
}

pub fn categorize(text: &str, client: &ChatClient) -> Result<CategoryOutcome> {
    let msg = format!("{}\n\n{}", categorization_prompt(), text);
    let first = client.complete("categorize", &msg)?;
    if let Some(category) = Category::parse(&first.text) {
        return Ok(CategoryOutcome {
            category,
            flagged: false,
            raw: first.text,
        });
    }
    let second = client.complete("categorize-retry", &msg)?;
    Ok(match Category::parse(&second.text) {
        Some(category) => CategoryOutcome {
            category,
            flagged: false,
            raw: second.text,
        },
        None => CategoryOutcome {
            category: Category::Other,
            flagged: true,
            raw: second.text,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryDistribution {
    pub counts: BTreeMap<Category, usize>,
    pub total: usize,
}

impl CategoryDistribution {
    pub fn percent(&self, c: Category) -> f64 {
        100.0 * self.counts.get(&c).copied().unwrap_or(0) as f64 / self.total as f64
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for c in Category::ALL {
            s += &format!("{:<26} {:6.2}%\n", c.name(), self.percent(c));
        }
        s
    }
}

pub fn aggregate_categories(labels: &[Category]) -> Result<CategoryDistribution> {
    if labels.is_empty() {
        return Err(Error::Empty("category labels"));
    }
    let mut counts = BTreeMap::new();
    for &c in labels {
        *counts.entry(c).or_insert(0) += 1;
    }
    Ok(CategoryDistribution {
        counts,
        total: labels.len(),
    })
}

/// One line of a batch input file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub id: String,
    pub text: String,
}

/// One line of a batch output file. `status` is `ok`, `flagged` (category
/// fallback) or `error: ...`; on error `text` keeps the input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchResult {
    pub id: String,
    pub text: String,
    pub status: String,
}

pub fn read_batch(path: &std::path::Path) -> Result<Vec<BatchRecord>> {
    let data = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    data.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Malformed {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn write_batch(path: &std::path::Path, results: &[BatchResult]) -> Result<()> {
    let mut s = String::new();
    for r in results {
        s += &serde_json::to_string(r)?;
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn run_batch(records: &[BatchRecord], parallelism: usize, f: impl Fn(&BatchRecord) -> BatchResult + Sync) -> Result<Vec<BatchResult>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(|| records.par_iter().map(&f).collect()))
}

/// Rewrite every record; failures are flagged per record and the batch
/// continues.
pub fn rewrite_batch(records: &[BatchRecord], prompt: RewritePrompt, client: &ChatClient, parallelism: usize) -> Result<Vec<BatchResult>> {
    run_batch(records, parallelism, |r| match rewrite(&r.text, prompt, client) {
        Ok(text) => BatchResult {
            id: r.id.clone(),
            text,
            status: "ok".into(),
        },
        Err(e) => BatchResult {
            id: r.id.clone(),
            text: r.text.clone(),
            status: format!("error: {e}"),
        },
    })
}

/// Categorize every record; the output `text` is the category name.
pub fn categorize_batch(records: &[BatchRecord], client: &ChatClient, parallelism: usize) -> Result<Vec<BatchResult>> {
    run_batch(records, parallelism, |r| match categorize(&r.text, client) {
        Ok(o) => BatchResult {
            id: r.id.clone(),
            text: o.category.name().to_string(),
            status: if o.flagged { "flagged".into() } else { "ok".into() },
        },
        Err(e) => BatchResult {
            id: r.id.clone(),
            text: r.text.clone(),
            status: format!("error: {e}"),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newlines_become_spaces() {
        assert_eq!(strip_formatting("Line1\n\nLine2"), "Line1 Line2");
    }

    #[test]
    fn list_markers_removed() {
        assert_eq!(strip_formatting("• item one\n2. item two"), "item one item two");
        assert_eq!(strip_formatting("Steps:\n a) mix\n b) bake\t now"), "Steps: mix bake now");
        assert_eq!(strip_formatting("- x\r\n* y\n– z"), "x y z");
    }

    #[test]
    fn inline_numbers_and_hyphens_survive() {
        assert_eq!(strip_formatting("It costs 2. Not 3"), "It costs 2. Not 3");
        assert_eq!(strip_formatting("a well-known fact - really"), "a well-known fact - really");
    }

    #[test]
    fn marker_after_sentence_end_dropped() {
        assert_eq!(strip_formatting("Intro. 1. first"), "Intro. first");
    }

    #[test]
    fn prompts_are_distinct() {
        assert!(RewritePrompt::P1.template().starts_with("Rewrite the following text sentence by sentence"));
        assert!(RewritePrompt::P3.template().ends_with("better readability:"));
        assert_eq!("2".parse::<RewritePrompt>().unwrap(), RewritePrompt::P2);
    }

    #[test]
    fn category_parsing() {
        assert_eq!(Category::parse("Science"), Some(Category::Science));
        assert_eq!(Category::parse(" health, wellness & fitness."), Some(Category::HealthWellnessFitness));
        assert_eq!(Category::parse("News & Media"), Some(Category::NewsMedia));
        assert_eq!(Category::parse("I think it is about cooking"), None);
        assert_eq!(Category::ALL.len(), 14);
    }

    #[test]
    fn distribution_percentages() {
        let d = aggregate_categories(&[Category::Science, Category::Science, Category::Other]).unwrap();
        assert!((d.percent(Category::Science) - 66.666).abs() < 0.01);
        assert!((d.percent(Category::Other) - 33.333).abs() < 0.01);
        assert!(aggregate_categories(&[]).is_err());
    }
}
