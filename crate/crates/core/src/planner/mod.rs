//! Instruction decomposition: ground abstract phrasing into concrete
//! imperative sentences, segment those into atomic tasks, then order the
//! tasks by dependency and complexity.

pub mod lexicon;
pub mod llm;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use llm::LlmBackend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskCategory {
    ColorAdjustment,
    TextureReplacement,
    MaterialProperties,
    LocalGeometryModification,
    CategorySwapping,
    StyleTransfer,
    BackgroundEditing,
}

impl TaskCategory {
    pub const ALL: [TaskCategory; 7] = [
        TaskCategory::ColorAdjustment,
        TaskCategory::TextureReplacement,
        TaskCategory::MaterialProperties,
        TaskCategory::LocalGeometryModification,
        TaskCategory::CategorySwapping,
        TaskCategory::StyleTransfer,
        TaskCategory::BackgroundEditing,
    ];

    /// Higher runs earlier when no dependency decides.
    pub fn complexity_rank(self) -> u32 {
        match self {
            TaskCategory::CategorySwapping => 5,
            TaskCategory::LocalGeometryModification => 4,
            TaskCategory::TextureReplacement | TaskCategory::MaterialProperties | TaskCategory::ColorAdjustment => 3,
            TaskCategory::BackgroundEditing => 2,
            TaskCategory::StyleTransfer => 1,
        }
    }

    /// Categories whose edit applies to the whole frame rather than a region.
    pub fn is_global(self) -> bool {
        matches!(self, TaskCategory::StyleTransfer)
    }
}

impl fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicTask {
    pub category: TaskCategory,
    pub prompt: String,
    pub subject: String,
    pub introduces: Option<String>,
    pub order: usize,
    pub complexity_rank: u32,
}

impl AtomicTask {
    pub fn new(category: TaskCategory, prompt: &str, subject: &str, introduces: Option<&str>) -> Self {
        AtomicTask {
            category,
            prompt: prompt.to_string(),
            subject: subject.to_string(),
            introduces: introduces.map(str::to_string),
            order: 0,
            complexity_rank: category.complexity_rank(),
        }
    }

    /// Noun phrases this task operates on, for dependency matching. A
    /// possessive subject ("fox's body") also depends on its owner.
    fn subject_keys(&self) -> Vec<String> {
        let s = normalize_phrase(&self.subject);
        let mut keys = vec![s.clone()];
        if let Some((owner, _)) = s.split_once("'s") {
            keys.push(normalize_phrase(owner));
        }
        keys
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Rule,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub backend: BackendKind,
    pub raw_instruction: String,
    pub grounded_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditPlan {
    pub tasks: Vec<AtomicTask>,
    pub provenance: Provenance,
}

/// Deterministic grounding: a table of known abstract instructions plus
/// pass-through for text that is already imperative.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RuleGrounder {
    pub fixtures: BTreeMap<String, String>,
}

impl RuleGrounder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fixture(mut self, instruction: &str, grounded: &str) -> Self {
        self.fixtures.insert(squash(instruction), grounded.to_string());
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: BTreeMap<String, String> = serde_json::from_str(&text)?;
        Ok(RuleGrounder {
            fixtures: raw.into_iter().map(|(k, v)| (squash(&k), v)).collect(),
        })
    }

    pub fn ground(&self, instruction: &str) -> Result<String> {
        let key = squash(instruction);
        if let Some(g) = self.fixtures.get(&key) {
            return Ok(g.clone());
        }
        if is_imperative(instruction) {
            Ok(instruction.to_string())
        } else {
            Err(Error::NeedsLlm(instruction.to_string()))
        }
    }
}

#[derive(Debug, Clone)]
pub enum Backend {
    Rule(RuleGrounder),
    Llm(LlmBackend),
}

impl Backend {
    pub fn kind(&self) -> BackendKind {
        match self {
            Backend::Rule(_) => BackendKind::Rule,
            Backend::Llm(_) => BackendKind::Llm,
        }
    }
}

fn squash(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn norm_word(w: &str) -> String {
    w.replace('\u{2019}', "'")
        .trim_matches(|c: char| !c.is_alphanumeric() && c != '\'')
        .trim_matches('\'')
        .to_lowercase()
}

/// Lowercases and drops leading articles.
pub fn normalize_phrase(s: &str) -> String {
    let words: Vec<String> = s.split_whitespace().map(norm_word).filter(|w| !w.is_empty()).collect();
    strip_articles(&words).join(" ")
}

fn strip_articles(words: &[String]) -> &[String] {
    let mut i = 0;
    while i < words.len() && lexicon::ARTICLES.contains(&words[i].as_str()) {
        i += 1;
    }
    &words[i..]
}

fn phrase(words: &[String]) -> String {
    strip_articles(words).join(" ")
}

fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        cur.push(c);
        let boundary = matches!(c, '.' | '!' | '?' | ';') && chars.get(i + 1).map_or(true, |n| n.is_whitespace());
        if boundary {
            out.push(std::mem::take(&mut cur));
        }
    }
    out.push(cur);
    out.into_iter()
        .map(|s| s.trim().trim_end_matches(['.', '!', '?', ';']).trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn is_imperative(text: &str) -> bool {
    let s = sentences(text);
    !s.is_empty()
        && s.iter().all(|sentence| {
            sentence
                .split_whitespace()
                .next()
                .is_some_and(|w| lexicon::is_verb(&norm_word(w)))
        })
}

/// Splits a sentence at commas and conjunctions that are followed by a new
/// verb.
fn clauses(sentence: &str) -> Vec<String> {
    let words: Vec<&str> = sentence.split_whitespace().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 1;
    while i < words.len() {
        let after_comma = words[i - 1].ends_with(',');
        let connector = lexicon::CONNECTORS.contains(&norm_word(words[i]).as_str());
        if after_comma || connector {
            let mut j = i;
            while j < words.len() && lexicon::CONNECTORS.contains(&norm_word(words[j]).as_str()) {
                j += 1;
            }
            if j < words.len() && lexicon::is_verb(&norm_word(words[j])) {
                out.push(words[start..i].join(" "));
                start = j;
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out.push(words[start..].join(" "));
    out.into_iter()
        .map(|c| c.trim().trim_end_matches([',', '.']).trim().to_string())
        .filter(|c| !c.is_empty())
        .collect()
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn position(words: &[String], targets: &[&str]) -> Option<usize> {
    words.iter().position(|w| targets.contains(&w.as_str()))
}

fn or_scene(s: String) -> String {
    if s.is_empty() {
        "scene".to_string()
    } else {
        s
    }
}

/// Classifies one imperative clause. Rules are tried in a fixed order; the
/// first match wins.
pub fn classify(clause: &str) -> Result<AtomicTask> {
    let prompt = capitalize(clause.trim());
    let words: Vec<String> = clause.split_whitespace().map(norm_word).filter(|w| !w.is_empty()).collect();
    let unclassifiable = || Error::UnclassifiableClause(clause.to_string());
    let v = words.iter().position(|w| lexicon::is_verb(w)).ok_or_else(unclassifiable)?;
    let verb = words[v].as_str();
    let rest = &words[v + 1..];
    let task = |cat, subject: String, intro: Option<String>| AtomicTask::new(cat, &prompt, &subject, intro.as_deref());

    if rest.iter().any(|w| w == "style") {
        let subject = match position(rest, &["into", "to", "in"]) {
            Some(p) => phrase(&rest[..p]),
            None => String::new(),
        };
        return Ok(task(TaskCategory::StyleTransfer, or_scene(subject), None));
    }
    if rest.iter().any(|w| w == "background") {
        return Ok(task(TaskCategory::BackgroundEditing, "background".into(), None));
    }
    if verb == "replace" {
        if let Some(p) = position(rest, &["with"]) {
            return Ok(task(TaskCategory::TextureReplacement, or_scene(phrase(&rest[..p])), None));
        }
    }
    if let Some(p) = position(rest, &["from"]) {
        let tail = &rest[p + 1..];
        if position(tail, &["to", "into"]).is_some() && tail.iter().any(|w| lexicon::is_material(w)) {
            return Ok(task(TaskCategory::MaterialProperties, or_scene(phrase(&rest[..p])), None));
        }
    }
    if ["turn", "convert", "transform", "change", "make"].contains(&verb) {
        if let Some(p) = position(rest, &["into", "to"]) {
            let target = &rest[p + 1..];
            let plain_noun = !target.is_empty()
                && !target
                    .iter()
                    .any(|w| lexicon::color_rgb(w).is_some() || lexicon::is_material(w));
            if plain_noun {
                let intro = phrase(target);
                return Ok(task(TaskCategory::CategorySwapping, or_scene(phrase(&rest[..p])), Some(intro)));
            }
        }
    }
    if let Some(c) = rest.iter().position(|w| lexicon::color_rgb(w).is_some()) {
        let mut end = c;
        while end > 0 && {
            let w = rest[end - 1].as_str();
            lexicon::COLOR_MODIFIERS.contains(&w) || ["to", "into"].contains(&w)
        } {
            end -= 1;
        }
        return Ok(task(TaskCategory::ColorAdjustment, or_scene(phrase(&rest[..end])), None));
    }
    match verb {
        "give" => {
            // give <recipient> <object>; the object starts at the next article.
            let skip = rest.len() - strip_articles(rest).len();
            let split = rest
                .iter()
                .enumerate()
                .skip(skip + 1)
                .find(|(_, w)| lexicon::ARTICLES.contains(&w.as_str()))
                .map(|(k, _)| k)
                .unwrap_or((skip + 1).min(rest.len()));
            let object = added_object(&rest[split..]);
            if object.is_empty() {
                return Err(unclassifiable());
            }
            Ok(task(TaskCategory::LocalGeometryModification, or_scene(phrase(&rest[..split])), Some(object)))
        }
        "add" | "put" => {
            let (object, subject) = match position(rest, lexicon::ATTACH_PREPS) {
                Some(p) => (added_object(&rest[..p]), phrase(&rest[p + 1..])),
                None => (added_object(rest), String::new()),
            };
            if object.is_empty() {
                return Err(unclassifiable());
            }
            Ok(task(TaskCategory::LocalGeometryModification, or_scene(subject), Some(object)))
        }
        _ => Err(unclassifiable()),
    }
}

/// "a pair of sunglasses" -> "sunglasses".
fn added_object(words: &[String]) -> String {
    let p = phrase(words);
    for q in ["pair of ", "set of ", "couple of ", "bunch of "] {
        if let Some(rest) = p.strip_prefix(q) {
            return rest.trim_start_matches("the ").to_string();
        }
    }
    p
}

pub fn ground(instruction: &str, backend: &Backend) -> Result<String> {
    if instruction.trim().is_empty() {
        return Err(Error::EmptyInstruction);
    }
    match backend {
        Backend::Rule(r) => r.ground(instruction),
        Backend::Llm(l) => Ok(l.request(instruction)?.grounded_text()),
    }
}

/// Splits grounded text into unordered atomic tasks.
pub fn segment(grounded: &str) -> Result<Vec<AtomicTask>> {
    let mut tasks = Vec::new();
    for sentence in sentences(grounded) {
        for clause in clauses(&sentence) {
            tasks.push(classify(&clause)?);
        }
    }
    if tasks.is_empty() {
        return Err(Error::EmptyInstruction);
    }
    Ok(tasks)
}

/// `deps[b]` lists every task `b` must follow.
pub fn dependencies(tasks: &[AtomicTask]) -> Vec<Vec<usize>> {
    tasks
        .iter()
        .enumerate()
        .map(|(b, tb)| {
            let keys = tb.subject_keys();
            tasks
                .iter()
                .enumerate()
                .filter(|&(a, ta)| {
                    a != b
                        && ta
                            .introduces
                            .as_deref()
                            .is_some_and(|i| keys.contains(&normalize_phrase(i)))
                })
                .map(|(a, _)| a)
                .collect()
        })
        .collect()
}

/// Topological order in which, among the tasks whose prerequisites are done,
/// the most complex runs first; ties keep input order. `order` fields are
/// assigned 1, 2, ...
pub fn order_tasks(tasks: Vec<AtomicTask>) -> Result<Vec<AtomicTask>> {
    let deps = dependencies(&tasks);
    let n = tasks.len();
    let mut done = vec![false; n];
    let mut seq = Vec::with_capacity(n);
    for _ in 0..n {
        let next = (0..n)
            .filter(|&i| !done[i] && deps[i].iter().all(|&d| done[d]))
            .max_by(|&a, &b| {
                tasks[a]
                    .category
                    .complexity_rank()
                    .cmp(&tasks[b].category.complexity_rank())
                    .then(b.cmp(&a))
            });
        match next {
            Some(i) => {
                done[i] = true;
                seq.push(i);
            }
            None => {
                let stuck = (0..n).filter(|&i| !done[i]).map(|i| tasks[i].prompt.clone()).collect();
                return Err(Error::CyclicDependency(stuck));
            }
        }
    }
    let mut slots: Vec<Option<AtomicTask>> = tasks.into_iter().map(Some).collect();
    Ok(seq
        .into_iter()
        .enumerate()
        .map(|(k, i)| {
            let mut t = slots[i].take().expect("each index once");
            t.order = k + 1;
            t.complexity_rank = t.category.complexity_rank();
            t
        })
        .collect())
}

pub fn order(tasks: Vec<AtomicTask>, provenance: Provenance) -> Result<EditPlan> {
    if tasks.is_empty() {
        return Err(Error::InvalidInput("no tasks to order".into()));
    }
    Ok(EditPlan {
        tasks: order_tasks(tasks)?,
        provenance,
    })
}

pub fn decompose(instruction: &str, backend: &Backend) -> Result<EditPlan> {
    if instruction.trim().is_empty() {
        return Err(Error::EmptyInstruction);
    }
    let (grounded, tasks) = match backend {
        Backend::Rule(r) => {
            let g = r.ground(instruction)?;
            let t = segment(&g)?;
            (g, t)
        }
        Backend::Llm(l) => {
            let reply = l.request(instruction)?;
            let g = reply.grounded_text();
            let t = if reply.tasks.is_empty() {
                segment(&g)?
            } else {
                reply.into_tasks()
            };
            (g, t)
        }
    };
    order(
        tasks,
        Provenance {
            backend: backend.kind(),
            raw_instruction: instruction.to_string(),
            grounded_text: grounded,
        },
    )
}

pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct PlanTaskRecord {
    category: TaskCategory,
    prompt: String,
    subject: String,
    introduces: Option<String>,
    order: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct PlanRecord {
    version: u32,
    #[serde(default)]
    backend: BackendKind,
    raw_instruction: String,
    grounded_text: String,
    tasks: Vec<PlanTaskRecord>,
}

impl EditPlan {
    pub fn to_json(&self) -> Result<String> {
        let rec = PlanRecord {
            version: PLAN_VERSION,
            backend: self.provenance.backend,
            raw_instruction: self.provenance.raw_instruction.clone(),
            grounded_text: self.provenance.grounded_text.clone(),
            tasks: self
                .tasks
                .iter()
                .map(|t| PlanTaskRecord {
                    category: t.category,
                    prompt: t.prompt.clone(),
                    subject: t.subject.clone(),
                    introduces: t.introduces.clone(),
                    order: t.order,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: PlanRecord = serde_json::from_str(text)?;
        if rec.version != PLAN_VERSION {
            return Err(Error::InvalidInput(format!("unsupported plan version {}", rec.version)));
        }
        let mut tasks: Vec<AtomicTask> = rec
            .tasks
            .into_iter()
            .map(|t| {
                let mut a = AtomicTask::new(t.category, &t.prompt, &t.subject, t.introduces.as_deref());
                a.order = t.order;
                a
            })
            .collect();
        tasks.sort_by_key(|t| t.order);
        let plan = EditPlan {
            tasks,
            provenance: Provenance {
                backend: rec.backend,
                raw_instruction: rec.raw_instruction,
                grounded_text: rec.grounded_text,
            },
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Unique orders, non-empty prompts, and every dependency pointing
    /// backward.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if t.prompt.trim().is_empty() {
                return Err(Error::InvalidInput("task with empty prompt".into()));
            }
            if !seen.insert(t.order) {
                return Err(Error::InvalidInput(format!("duplicate task order {}", t.order)));
            }
        }
        for (b, deps) in dependencies(&self.tasks).iter().enumerate() {
            for &a in deps {
                if self.tasks[a].order >= self.tasks[b].order {
                    return Err(Error::InvalidInput(format!(
                        "task {:?} must come after {:?}",
                        self.tasks[b].prompt, self.tasks[a].prompt
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rule() -> Backend {
        Backend::Rule(RuleGrounder::new())
    }

    #[test]
    fn concrete_text_passes_through() {
        assert_eq!(ground("Turn the cat into a fox", &rule()).unwrap(), "Turn the cat into a fox");
    }

    #[test]
    fn abstract_text_needs_llm() {
        assert!(matches!(ground("I wish it were nicer", &rule()), Err(Error::NeedsLlm(_))));
        assert!(matches!(ground("   ", &rule()), Err(Error::EmptyInstruction)));
        assert!(matches!(decompose("", &rule()), Err(Error::EmptyInstruction)));
    }

    #[test]
    fn fixture_lookup_ignores_whitespace() {
        let g = RuleGrounder::new().with_fixture("be  nice", "Make the cat red.");
        assert_eq!(g.ground("be nice").unwrap(), "Make the cat red.");
    }

    #[test]
    fn taxonomy_examples() {
        let cases = [
            ("Repaint the wall blue", TaskCategory::ColorAdjustment, "wall", None),
            ("Replace wooden flooring with marble", TaskCategory::TextureReplacement, "wooden flooring", None),
            ("Change from metal to wood", TaskCategory::MaterialProperties, "scene", None),
            ("Add a hat to the cat", TaskCategory::LocalGeometryModification, "cat", Some("hat")),
            ("Convert the dog into a cat", TaskCategory::CategorySwapping, "dog", Some("cat")),
            ("Change to cyberpunk style", TaskCategory::StyleTransfer, "scene", None),
            ("Set the background to a forest", TaskCategory::BackgroundEditing, "background", None),
            ("Turn the fox's body white", TaskCategory::ColorAdjustment, "fox's body", None),
            ("Make the man's apron yellow", TaskCategory::ColorAdjustment, "man's apron", None),
            ("Give the fox a pair of sunglasses", TaskCategory::LocalGeometryModification, "fox", Some("sunglasses")),
        ];
        for (text, cat, subject, intro) in cases {
            let t = classify(text).unwrap();
            assert_eq!(t.category, cat, "{text}");
            assert_eq!(t.subject, subject, "{text}");
            assert_eq!(t.introduces.as_deref(), intro, "{text}");
            assert_eq!(t.prompt, text);
        }
    }

    #[test]
    fn unclassifiable() {
        match segment("Flurb the glonk") {
            Err(Error::UnclassifiableClause(c)) => assert_eq!(c, "Flurb the glonk"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn compound_sentence_splits_at_new_verb() {
        let tasks = segment("Turn the cat to a fox, and then give the fox a pair of sunglasses").unwrap();
        let prompts: Vec<_> = tasks.iter().map(|t| t.prompt.as_str()).collect();
        assert_eq!(prompts, ["Turn the cat to a fox", "Give the fox a pair of sunglasses"]);
        let tasks = segment("Make the man's apron yellow, make the bookshelf blue, and turn the scene into the Van Gogh painting style.").unwrap();
        assert_eq!(tasks.len(), 3);
        let tasks = segment("Add a flower to the pillow and make the scene in the Miro painting style").unwrap();
        assert_eq!(tasks[0].category, TaskCategory::LocalGeometryModification);
        assert_eq!(tasks[1].category, TaskCategory::StyleTransfer);
    }

    #[test]
    fn conjunction_without_verb_does_not_split() {
        let tasks = segment("Make the cup and the plate red").unwrap();
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].subject, "cup and the plate");
    }

    #[test]
    fn single_task_orders_to_itself() {
        let plan = decompose("Repaint the wall blue", &rule()).unwrap();
        assert_eq!(plan.tasks.len(), 1);
        assert_eq!(plan.tasks[0].order, 1);
        assert_eq!(plan.tasks[0].category, TaskCategory::ColorAdjustment);
    }

    #[test]
    fn independent_equal_rank_keeps_input_order() {
        let plan = decompose("Make the cup red. Make the plate blue.", &rule()).unwrap();
        let subjects: Vec<_> = plan.tasks.iter().map(|t| t.subject.as_str()).collect();
        assert_eq!(subjects, ["cup", "plate"]);
    }

    #[test]
    fn dependency_beats_complexity() {
        // The recolour needs the hat, which needs the fox.
        let tasks = vec![
            AtomicTask::new(TaskCategory::LocalGeometryModification, "Give the fox a hat", "fox", Some("hat")),
            AtomicTask::new(TaskCategory::ColorAdjustment, "Make the hat red", "hat", None),
            AtomicTask::new(TaskCategory::CategorySwapping, "Turn the cat into a fox", "cat", Some("fox")),
        ];
        let out = order_tasks(tasks).unwrap();
        let prompts: Vec<_> = out.iter().map(|t| t.prompt.as_str()).collect();
        assert_eq!(prompts, ["Turn the cat into a fox", "Give the fox a hat", "Make the hat red"]);
    }

    #[test]
    fn cycle_is_reported() {
        let tasks = vec![
            AtomicTask::new(TaskCategory::CategorySwapping, "Turn the cat into a fox", "cat", Some("fox")),
            AtomicTask::new(TaskCategory::CategorySwapping, "Turn the fox into a cat", "fox", Some("cat")),
        ];
        assert!(matches!(order_tasks(tasks), Err(Error::CyclicDependency(v)) if v.len() == 2));
    }

    #[test]
    fn plan_json_round_trip() {
        let plan = decompose("Turn the cat to a fox, and then give the fox a pair of sunglasses", &rule()).unwrap();
        let json = plan.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["tasks"][0]["category"], "CategorySwapping");
        assert_eq!(v["tasks"][1]["introduces"], "sunglasses");
        assert_eq!(EditPlan::from_json(&json).unwrap(), plan);
    }

    #[test]
    fn plan_with_backward_dependency_is_rejected() {
        let mut plan = decompose("Turn the cat into a fox. Turn the fox's body white.", &rule()).unwrap();
        plan.tasks.reverse();
        for (k, t) in plan.tasks.iter_mut().enumerate() {
            t.order = k + 1;
        }
        assert!(plan.validate().is_err());
    }

    fn arb_task() -> impl Strategy<Value = AtomicTask> {
        let nouns = ["cat", "fox", "dog", "hat", "wall", "scene"];
        (0usize..7, 0usize..6, proptest::option::of(0usize..6)).prop_map(move |(c, s, i)| {
            let cat = TaskCategory::ALL[c];
            AtomicTask::new(
                cat,
                &format!("task {c} {s} {i:?}"),
                nouns[s],
                i.map(|k| nouns[k]).filter(|k| *k != nouns[s]),
            )
        })
    }

    proptest! {
        #[test]
        fn ordering_is_a_permutation_respecting_dependencies(tasks in proptest::collection::vec(arb_task(), 1..8)) {
            match order_tasks(tasks.clone()) {
                Ok(out) => {
                    prop_assert_eq!(out.len(), tasks.len());
                    let mut a: Vec<_> = tasks.iter().map(|t| t.prompt.clone()).collect();
                    let mut b: Vec<_> = out.iter().map(|t| t.prompt.clone()).collect();
                    a.sort();
                    b.sort();
                    prop_assert_eq!(a, b);
                    for (k, t) in out.iter().enumerate() {
                        prop_assert_eq!(t.order, k + 1);
                    }
                    for (b, deps) in dependencies(&out).iter().enumerate() {
                        for &a in deps {
                            prop_assert!(a < b);
                        }
                    }
                }
                Err(Error::CyclicDependency(_)) => {}
                Err(e) => prop_assert!(false, "{e}"),
            }
        }

        #[test]
        fn rule_decompose_is_pure(pick in proptest::collection::vec(0usize..5, 1..4)) {
            let parts = ["Repaint the wall blue", "Turn the cat into a fox", "Give the fox a hat",
                         "Change to cyberpunk style", "Set the background to a forest"];
            let text = pick.iter().map(|&i| parts[i]).collect::<Vec<_>>().join(". ");
            let a = decompose(&text, &rule()).unwrap().to_json().unwrap();
            let b = decompose(&text, &rule()).unwrap().to_json().unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
