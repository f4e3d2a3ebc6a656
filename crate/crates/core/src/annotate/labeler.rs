use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::AnnotateError;
use crate::seed::fnv1a64;

/// Ordered, duplicate-free list of admissible labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    labels: Vec<String>,
}

impl Taxonomy {
    pub fn new(labels: impl IntoIterator<Item = impl AsRef<str>>) -> Result<Self, AnnotateError> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for label in labels {
            let label = label.as_ref().trim();
            if label.is_empty() {
                return Err(AnnotateError::Taxonomy("empty label".into()));
            }
            if !seen.insert(label.to_owned()) {
                return Err(AnnotateError::Taxonomy(format!("duplicate label {label:?}")));
            }
            out.push(label.to_owned());
        }
        if out.len() < 2 {
            return Err(AnnotateError::Taxonomy(format!(
                "a taxonomy needs at least 2 labels, got {}",
                out.len()
            )));
        }
        Ok(Self { labels: out })
    }

    /// One label per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, AnnotateError> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn load(path: &Path) -> Result<Self, AnnotateError> {
        let text = fs::read_to_string(path).map_err(|e| AnnotateError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Free-form labels proposed by the model.
    #[default]
    Generate,
    /// Labels picked from a taxonomy.
    Select,
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelMode::Generate => "generate",
            LabelMode::Select => "select",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelerRequest {
    pub mode: LabelMode,
    pub keywords: Vec<String>,
    pub taxonomy: Option<Taxonomy>,
    pub max_labels: usize,
    /// Sample excerpt, only set when labeling samples one at a time.
    pub text: Option<String>,
}

impl LabelerRequest {
    /// Hash of the keyword list, stable across runs.
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.keywords.join("\u{1f}").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub generate: String,
    pub select: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            generate: include_str!("../../templates/generate.txt").to_owned(),
            select: include_str!("../../templates/select.txt").to_owned(),
        }
    }
}

impl PromptTemplates {
    pub fn new(generate: String, select: String) -> Result<Self, AnnotateError> {
        for (name, template) in [("generate", &generate), ("select", &select)] {
            if !template.contains("{{keywords}}") {
                return Err(AnnotateError::Template(format!(
                    "{name} template lacks the {{{{keywords}}}} placeholder"
                )));
            }
        }
        if !select.contains("{{taxonomy}}") {
            return Err(AnnotateError::Template(
                "select template lacks the {{taxonomy}} placeholder".into(),
            ));
        }
        Ok(Self { generate, select })
    }

    pub fn load(generate: Option<&Path>, select: Option<&Path>) -> Result<Self, AnnotateError> {
        let defaults = Self::default();
        let read = |p: &Path| fs::read_to_string(p).map_err(|e| AnnotateError::io(p, e));
        Self::new(
            generate.map(read).transpose()?.unwrap_or(defaults.generate),
            select.map(read).transpose()?.unwrap_or(defaults.select),
        )
    }
}

pub fn build_prompt(request: &LabelerRequest, templates: &PromptTemplates) -> Result<String, AnnotateError> {
    let (template, taxonomy) = match request.mode {
        LabelMode::Generate => (&templates.generate, String::new()),
        LabelMode::Select => {
            let taxonomy = request
                .taxonomy
                .as_ref()
                .ok_or(AnnotateError::MissingTaxonomy)?;
            let listed = taxonomy
                .labels()
                .iter()
                .map(|l| format!("- {l}"))
                .collect::<Vec<_>>()
                .join("\n");
            (&templates.select, listed)
        }
    };
    Ok(template
        .replace("{{keywords}}", &request.keywords.join(", "))
        .replace("{{taxonomy}}", &taxonomy)
        .replace("{{max_labels}}", &request.max_labels.to_string())
        .replace("{{text}}", request.text.as_deref().unwrap_or("")))
}

/// Extracts the first JSON array of strings from a completion. Labels are
/// trimmed, empties dropped, duplicates removed, and the list cut to
/// `max_labels`.
pub fn parse_label_response(text: &str, max_labels: usize) -> Result<Vec<String>, AnnotateError> {
    let bad = || AnnotateError::BadResponse(text.chars().take(200).collect());
    let mut search = 0;
    while let Some(start) = text[search..].find('[').map(|i| i + search) {
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Vec<String>>();
        if let Some(Ok(labels)) = stream.next() {
            let mut seen = HashSet::new();
            let labels: Vec<String> = labels
                .into_iter()
                .map(|l| l.trim().to_owned())
                .filter(|l| !l.is_empty() && seen.insert(l.clone()))
                .take(max_labels)
                .collect();
            return if labels.is_empty() { Err(bad()) } else { Ok(labels) };
        }
        search = start + 1;
    }
    Err(bad())
}

/// Anything that turns a labeling request into labels.
pub trait Labeler {
    fn label(&self, request: &LabelerRequest) -> Result<Vec<String>, AnnotateError>;
}

impl<L: Labeler + ?Sized> Labeler for &L {
    fn label(&self, request: &LabelerRequest) -> Result<Vec<String>, AnnotateError> {
        (**self).label(request)
    }
}

/// Text-completion backend: `{prompt, max_tokens} -> {text}`.
pub trait CompletionClient {
    fn complete(&self, prompt: &str, max_tokens: u32) -> Result<String, AnnotateError>;
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

#[derive(Debug, Clone)]
pub struct HttpCompletionClient {
    url: String,
    agent: ureq::Agent,
    attempts: u32,
    backoff: Duration,
}

impl HttpCompletionClient {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: url.into(),
            agent,
            attempts: 3,
            backoff: Duration::from_millis(500),
        }
    }

    /// Retry policy: `attempts` tries, sleeping `backoff * 2^i` after the
    /// i-th failure.
    pub fn with_retry(mut self, attempts: u32, backoff: Duration) -> Self {
        self.attempts = attempts.max(1);
        self.backoff = backoff;
        self
    }

    fn call(&self, prompt: &str, max_tokens: u32) -> Result<String, String> {
        let response = self
            .agent
            .post(&self.url)
            .send_json(CompletionRequest { prompt, max_tokens })
            .map_err(|e| e.to_string())?;
        let body: CompletionResponse = response
            .into_body()
            .read_json()
            .map_err(|e| e.to_string())?;
        Ok(body.text)
    }
}

impl CompletionClient for HttpCompletionClient {
    fn complete(&self, prompt: &str, max_tokens: u32) -> Result<String, AnnotateError> {
        let mut last = String::new();
        for attempt in 0..self.attempts {
            match self.call(prompt, max_tokens) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("labeler request {} of {} failed: {e}", attempt + 1, self.attempts);
                    last = e;
                    if attempt + 1 < self.attempts {
                        thread::sleep(self.backoff * 2u32.pow(attempt));
                    }
                }
            }
        }
        Err(AnnotateError::Labeler(format!(
            "{} failed after {} attempts: {last}",
            self.url, self.attempts
        )))
    }
}

/// Labeler backed by a completion model and prompt templates.
#[derive(Debug, Clone)]
pub struct LlmLabeler<C> {
    client: C,
    templates: PromptTemplates,
    max_tokens: u32,
}

impl<C: CompletionClient> LlmLabeler<C> {
    pub fn new(client: C, templates: PromptTemplates) -> Self {
        Self {
            client,
            templates,
            max_tokens: 64,
        }
    }
}

impl<C: CompletionClient> Labeler for LlmLabeler<C> {
    fn label(&self, request: &LabelerRequest) -> Result<Vec<String>, AnnotateError> {
        let prompt = build_prompt(request, &self.templates)?;
        let text = self.client.complete(&prompt, self.max_tokens)?;
        parse_label_response(&text, request.max_labels)
    }
}

/// A fixed mapping used by the mock labeler: a request matches the rule when
/// its keywords contain any of the triggers as substrings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockRule {
    pub labels: Vec<String>,
    pub triggers: Vec<String>,
}

/// Offline labeler. Picks the rule whose triggers hit the most keywords
/// (first rule wins ties). Without a matching rule the label is derived from
/// the keyword fingerprint: a taxonomy entry in select mode, `Topic-xxxx`
/// in generate mode.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MockLabeler {
    rules: Vec<MockRule>,
}

impl MockLabeler {
    pub fn new(rules: Vec<MockRule>) -> Self {
        Self { rules }
    }

    /// Rules file: `Label[, Label...]: trigger trigger ...` per line, `#`
    /// comments allowed.
    pub fn parse_rules(text: &str) -> Result<Self, AnnotateError> {
        let mut rules = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (labels, triggers) = line.split_once(':').ok_or_else(|| {
                AnnotateError::InvalidConfig(format!("mock rules line {}: expected `labels: triggers`", idx + 1))
            })?;
            let labels: Vec<String> = labels
                .split(',')
                .map(|l| l.trim().to_owned())
                .filter(|l| !l.is_empty())
                .collect();
            let triggers: Vec<String> = triggers.split_whitespace().map(|t| t.to_lowercase()).collect();
            if labels.is_empty() || triggers.is_empty() {
                return Err(AnnotateError::InvalidConfig(format!(
                    "mock rules line {}: needs at least one label and one trigger",
                    idx + 1
                )));
            }
            rules.push(MockRule { labels, triggers });
        }
        Ok(Self { rules })
    }

    pub fn load_rules(path: &Path) -> Result<Self, AnnotateError> {
        let text = fs::read_to_string(path).map_err(|e| AnnotateError::io(path, e))?;
        Self::parse_rules(&text)
    }

    fn best_rule(&self, request: &LabelerRequest) -> Option<&MockRule> {
        let mut best: Option<(&MockRule, usize)> = None;
        for rule in &self.rules {
            let hits = request
                .keywords
                .iter()
                .filter(|k| rule.triggers.iter().any(|t| k.contains(t.as_str())))
                .count();
            if hits > 0 && best.is_none_or(|(_, h)| hits > h) {
                best = Some((rule, hits));
            }
        }
        best.map(|(rule, _)| rule)
    }
}

impl Labeler for MockLabeler {
    fn label(&self, request: &LabelerRequest) -> Result<Vec<String>, AnnotateError> {
        let fingerprint = request.fingerprint();
        let max = request.max_labels.max(1);
        match request.mode {
            LabelMode::Generate => Ok(match self.best_rule(request) {
                Some(rule) => rule.labels.iter().take(max).cloned().collect(),
                None => vec![format!("Topic-{:04x}", fingerprint & 0xffff)],
            }),
            LabelMode::Select => {
                let taxonomy = request.taxonomy.as_ref().ok_or(AnnotateError::MissingTaxonomy)?;
                let from_rule: Vec<String> = self
                    .best_rule(request)
                    .map(|rule| {
                        rule.labels
                            .iter()
                            .filter(|l| taxonomy.contains(l))
                            .take(max)
                            .cloned()
                            .collect()
                    })
                    .unwrap_or_default();
                if from_rule.is_empty() {
                    let labels = taxonomy.labels();
                    Ok(vec![labels[(fingerprint % labels.len() as u64) as usize].clone()])
                } else {
                    Ok(from_rule)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(mode: LabelMode, keywords: &[&str], taxonomy: Option<Taxonomy>) -> LabelerRequest {
        LabelerRequest {
            mode,
            keywords: keywords.iter().map(|s| s.to_string()).collect(),
            taxonomy,
            max_labels: 3,
            text: None,
        }
    }

    fn taxonomy() -> Taxonomy {
        Taxonomy::new(["Technology", "History"]).unwrap()
    }

    #[test]
    fn taxonomy_file_format() {
        let t = Taxonomy::parse("# main topics\nTechnology\n\n  History  \n").unwrap();
        assert_eq!(t.labels(), ["Technology", "History"]);
        assert!(Taxonomy::parse("Technology\nTechnology\n").is_err());
        assert!(Taxonomy::parse("Technology\n").is_err());
    }

    #[test]
    fn generate_prompt_lists_keywords_once() {
        let prompt = build_prompt(&request(LabelMode::Generate, &["k1", "k2"], None), &PromptTemplates::default()).unwrap();
        assert_eq!(prompt.matches("k1, k2").count(), 1);
        assert!(prompt.contains("at most 3"));
        assert!(!prompt.contains("{{"));
    }

    #[test]
    fn select_prompt_lists_taxonomy_and_requires_it() {
        let templates = PromptTemplates::default();
        let prompt = build_prompt(&request(LabelMode::Select, &["cpu"], Some(taxonomy())), &templates).unwrap();
        assert!(prompt.contains("Technology") && prompt.contains("History"));
        assert_eq!(prompt, build_prompt(&request(LabelMode::Select, &["cpu"], Some(taxonomy())), &templates).unwrap());
        assert!(matches!(
            build_prompt(&request(LabelMode::Select, &["cpu"], None), &templates),
            Err(AnnotateError::MissingTaxonomy)
        ));
    }

    #[test]
    fn templates_must_carry_placeholders() {
        assert!(PromptTemplates::new("no placeholder".into(), "{{keywords}} {{taxonomy}}".into()).is_err());
        assert!(PromptTemplates::new("{{keywords}}".into(), "{{keywords}}".into()).is_err());
        assert!(PromptTemplates::new("{{keywords}}".into(), "{{keywords}} {{taxonomy}}".into()).is_ok());
    }

    #[test]
    fn parses_first_string_array() {
        assert_eq!(
            parse_label_response("Sure! [1, 2] then [\" Science \", \"Health\", \"Science\"]", 3).unwrap(),
            vec!["Science", "Health"]
        );
        assert_eq!(parse_label_response("[\"a\",\"b\",\"c\",\"d\"]", 2).unwrap(), vec!["a", "b"]);
        assert!(parse_label_response("no labels here", 3).is_err());
        assert!(parse_label_response("[]", 3).is_err());
    }

    #[test]
    fn mock_rules_pick_best_match() {
        let mock = MockLabeler::parse_rules("Technology: cpu gpu\nHistory: rome empire\n").unwrap();
        let labels = mock.label(&request(LabelMode::Generate, &["gpu", "rome", "empire"], None)).unwrap();
        assert_eq!(labels, vec!["History"]);
        let fallback = mock.label(&request(LabelMode::Generate, &["quartz"], None)).unwrap();
        assert!(fallback[0].starts_with("Topic-"));
    }

    #[test]
    fn mock_select_stays_in_taxonomy() {
        let mock = MockLabeler::parse_rules("Sports: ball\n").unwrap();
        let t = taxonomy();
        for kw in ["ball", "cpu", "x", "yy"] {
            let labels = mock.label(&request(LabelMode::Select, &[kw], Some(t.clone()))).unwrap();
            assert!(labels.iter().all(|l| t.contains(l)), "{labels:?}");
        }
    }
}
