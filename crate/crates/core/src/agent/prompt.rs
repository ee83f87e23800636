//! Prompt rules and prompt assembly.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::TestInstance;
use crate::error::{Error, Result};
use crate::restructure::ValueList;

pub const TEMPLATE_VERSION: &str = "base-v1";
pub const SYSTEM_TEMPLATE: &str = include_str!("../../assets/prompt_system.txt");
pub const HUMAN_TEMPLATE: &str = include_str!("../../assets/prompt_human.txt");
pub const NO_THINK: &str = "/no_think";

const VALUE_LIST_SLOT: &str = "{value_list}";
const QUESTION_SLOT: &str = "{question}";
/// Rules go right before this sentence.
const FINAL_INSTRUCTION: &str = "Do not generate";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RuleOrigin {
    Manual,
    Cluster { run_id: String, iteration: u32, cluster_id: i32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleStatus {
    Candidate,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub rule_id: String,
    pub text: String,
    pub origin: RuleOrigin,
    pub status: RuleStatus,
}

/// Checks and trims a rule line.
pub fn validate_rule_text(text: &str) -> Result<String> {
    let t = text.trim();
    if t.is_empty() {
        return Err(Error::InvalidRule("rule text is empty".into()));
    }
    if t.contains('\n') || t.contains('\r') {
        return Err(Error::InvalidRule("rule text must be a single line".into()));
    }
    if t.contains(VALUE_LIST_SLOT) || t.contains(QUESTION_SLOT) {
        return Err(Error::InvalidRule("rule text must not contain template placeholders".into()));
    }
    Ok(t.to_string())
}

impl Rule {
    pub fn new(rule_id: impl Into<String>, text: &str, origin: RuleOrigin) -> Result<Self> {
        Ok(Rule {
            rule_id: rule_id.into(),
            text: validate_rule_text(text)?,
            origin,
            status: RuleStatus::Candidate,
        })
    }
}

/// Accepted rules in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    rules: Vec<Rule>,
}

impl RuleSet {
    pub fn new() -> Self {
        RuleSet::default()
    }

    pub fn push(&mut self, mut rule: Rule) -> Result<()> {
        if self.rules.iter().any(|r| r.text == rule.text) {
            return Err(Error::Duplicate(format!("rule `{}` is already in the rule set", rule.text)));
        }
        rule.status = RuleStatus::Accepted;
        self.rules.push(rule);
        Ok(())
    }

    /// Rule set plus one more rule, without mutating `self`.
    pub fn with(&self, rule: Rule) -> Result<RuleSet> {
        let mut next = self.clone();
        next.push(rule)?;
        Ok(next)
    }

    /// Removes the most recent rule.
    pub fn pop(&mut self) -> Option<Rule> {
        self.rules.pop()
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn texts(&self) -> Vec<String> {
        self.rules.iter().map(|r| r.text.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThinkPlacement {
    /// Do not add the suppression token.
    Off,
    #[default]
    Human,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub human_text: String,
    pub think_suppressed: bool,
}

impl PromptBundle {
    /// sha256 over both texts; identifies a prompt version.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system_text.as_bytes());
        h.update([0u8]);
        h.update(self.human_text.as_bytes());
        hex::encode(h.finalize())
    }
}

/// The system and human templates. The default is the shipped base template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system: String,
    pub human: String,
    pub think: ThinkPlacement,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            system: SYSTEM_TEMPLATE.to_string(),
            human: HUMAN_TEMPLATE.to_string(),
            think: ThinkPlacement::default(),
        }
    }
}

/// Replaces each slot once, scanning the template only, so slot-like text in
/// the substituted values is left alone.
fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + slots.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    let mut done = vec![false; slots.len()];
    loop {
        let next = slots
            .iter()
            .enumerate()
            .filter(|(i, _)| !done[*i])
            .filter_map(|(i, (slot, _))| rest.find(slot).map(|pos| (pos, i)))
            .min();
        match next {
            Some((pos, i)) => {
                out.push_str(&rest[..pos]);
                out.push_str(slots[i].1);
                rest = &rest[pos + slots[i].0.len()..];
                done[i] = true;
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}

impl PromptTemplate {
    /// The human template with rule lines inserted before the final instruction.
    pub fn human_with_rules(&self, rules: &[String]) -> String {
        let block: String = rules.iter().map(|r| format!("{r}\n\n")).collect();
        match self.human.rfind(FINAL_INSTRUCTION) {
            Some(pos) => format!("{}{}{}", &self.human[..pos], block, &self.human[pos..]),
            None => format!("{}\n\n{}", self.human, block.trim_end()),
        }
    }

    pub fn render(&self, value_list_json: &str, question: &str, rules: &[String]) -> PromptBundle {
        let human = fill(&self.human_with_rules(rules), &[(VALUE_LIST_SLOT, value_list_json), (QUESTION_SLOT, question)]);
        let mut bundle = PromptBundle {
            system_text: self.system.clone(),
            human_text: human,
            think_suppressed: self.think != ThinkPlacement::Off,
        };
        match self.think {
            ThinkPlacement::Off => {}
            ThinkPlacement::Human => {
                bundle.human_text.push('\n');
                bundle.human_text.push_str(NO_THINK);
            }
            ThinkPlacement::System => {
                bundle.system_text.push('\n');
                bundle.system_text.push_str(NO_THINK);
            }
        }
        bundle
    }
}

/// Prompt for one instance under the given rules.
pub fn build_prompt(template: &PromptTemplate, instance: &TestInstance, value_list: &ValueList, rules: &RuleSet) -> PromptBundle {
    template.render(&value_list.to_json(false), &instance.question, &rules.texts())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain() -> PromptTemplate {
        PromptTemplate {
            think: ThinkPlacement::Off,
            ..PromptTemplate::default()
        }
    }

    #[test]
    fn empty_rules_leave_template_unchanged() {
        let t = plain();
        assert_eq!(t.human_with_rules(&[]), HUMAN_TEMPLATE);
        let b = t.render("{value_list}", "{question}", &[]);
        assert_eq!(b.human_text, HUMAN_TEMPLATE);
        assert_eq!(b.system_text, SYSTEM_TEMPLATE);
    }

    #[test]
    fn single_rule_inserted_before_final_instruction() {
        let h = plain().human_with_rules(&["X".to_string()]);
        assert!(h.contains("an empty string. \n\nX\n\nDo not generate"));
    }

    #[test]
    fn slots_filled_once_and_not_recursively() {
        let b = plain().render("[{\"category\":\"{question}\"}]", "What is {value_list}?", &[]);
        assert!(b.human_text.contains("VALUE_LIST: [{\"category\":\"{question}\"}]"));
        assert!(b.human_text.contains("QUESTION: What is {value_list}?"));
    }

    #[test]
    fn no_think_placement() {
        let t = PromptTemplate::default();
        let b = t.render("[]", "q", &[]);
        assert!(b.human_text.ends_with("just the function. \n/no_think"));
        assert!(b.think_suppressed);
        let s = PromptTemplate {
            think: ThinkPlacement::System,
            ..PromptTemplate::default()
        }
        .render("[]", "q", &[]);
        assert!(s.system_text.ends_with("/no_think"));
        assert!(!s.human_text.contains("/no_think"));
    }

    #[test]
    fn rule_validation() {
        assert!(validate_rule_text("  ").is_err());
        assert!(validate_rule_text("a\nb").is_err());
        assert!(validate_rule_text("use {value_list}").is_err());
        assert_eq!(validate_rule_text(" keep it ").unwrap(), "keep it");
        let mut rs = RuleSet::new();
        rs.push(Rule::new("r1", "A", RuleOrigin::Manual).unwrap()).unwrap();
        assert!(rs.push(Rule::new("r2", "A", RuleOrigin::Manual).unwrap()).is_err());
        assert_eq!(rs.rules()[0].status, RuleStatus::Accepted);
    }

    #[test]
    fn hash_tracks_content() {
        let t = plain();
        let a = t.render("[]", "q", &[]);
        let b = t.render("[]", "q", &["R".into()]);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), t.render("[]", "q", &[]).hash());
    }
}
