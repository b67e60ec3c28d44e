//! The TaskFlow tree: dialogue-action nodes joined by condition-bearing
//! edges, built by inserting sampled action sequences one at a time.
//!
//! Every edit returns a new snapshot with a higher version; the input snapshot
//! is left untouched.

mod store;
mod validate;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::actions::ActionCatalog;
use crate::corpus::Speaker;
use crate::ngram::NGramModel;
use crate::sampler::ScoredSequence;
use crate::value::{CmpOp, Value, ValueType};

pub use store::{PublishError, TaskFlowStore};
pub use validate::{validate_taskflow, Issue, IssueCode, Severity};

#[derive(Debug, Error)]
pub enum TaskFlowError {
    #[error("no sampled sequences to insert")]
    NoSamples,
    #[error("action {0:?} is not in the action catalog")]
    UnknownAction(String),
    #[error("transition to {action:?} has zero probability under the model")]
    UnseenTransition { action: String },
    #[error("node {0:?} does not exist")]
    UnknownNode(String),
    #[error("edge {0:?} does not exist")]
    UnknownEdge(String),
    #[error("node {0:?} is not a user action node")]
    NotUserAction(String),
    #[error("node {child:?} is not a child of {parent:?}")]
    NotAChild { parent: String, child: String },
    #[error("path {0:?} does not name a declared API response field")]
    UnknownPath(String),
    #[error("a different API spec named {0:?} already exists")]
    ApiSpecConflict(String),
    #[error("edit produces an invalid tree: {}", summarize(.0))]
    Validation(Vec<Issue>),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn summarize(issues: &[Issue]) -> String {
    issues
        .iter()
        .map(|i| i.message.as_str())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Root,
    #[serde(rename = "user")]
    UserAction,
    #[serde(rename = "staff")]
    StaffAction,
    #[serde(rename = "api")]
    ApiCall,
}

impl NodeKind {
    pub fn for_role(role: Speaker) -> Self {
        match role {
            Speaker::User => NodeKind::UserAction,
            Speaker::Staff => NodeKind::StaffAction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_id: Option<String>,
    /// Name of the [`ApiSpec`] an ApiCall node executes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api: Option<String>,
    /// Canonical utterance of the node's action.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Some inserted sequence ends here.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub end: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    /// `api.<name>.<field>`
    pub path: String,
    pub op: CmpOp,
    #[serde(rename = "lit")]
    pub literal: Value,
}

impl Predicate {
    pub fn new(path: impl Into<String>, op: CmpOp, literal: impl Into<Value>) -> Self {
        Self {
            path: path.into(),
            op,
            literal: literal.into(),
        }
    }

    /// `(api name, field)` of an `api.<name>.<field>` path.
    pub fn api_field(&self) -> Option<(&str, &str)> {
        parse_api_path(&self.path)
    }
}

pub fn parse_api_path(path: &str) -> Option<(&str, &str)> {
    let rest = path.strip_prefix("api.")?;
    let (name, field) = rest.rsplit_once('.')?;
    (!name.is_empty() && !field.is_empty()).then_some((name, field))
}

pub fn api_path(api: &str, field: &str) -> String {
    format!("api.{api}.{field}")
}

#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    /// Competes with sibling edges by transition probability.
    MaxProb,
    Always,
    Predicate(Predicate),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ConditionRepr {
    Keyword(String),
    Predicate(Predicate),
}

impl Serialize for Condition {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Condition::MaxProb => s.serialize_str("maxprob"),
            Condition::Always => s.serialize_str("always"),
            Condition::Predicate(p) => p.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Condition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match ConditionRepr::deserialize(d)? {
            ConditionRepr::Keyword(k) if k == "maxprob" => Ok(Condition::MaxProb),
            ConditionRepr::Keyword(k) if k == "always" => Ok(Condition::Always),
            ConditionRepr::Keyword(k) => Err(serde::de::Error::custom(format!(
                "unknown condition {k:?}, expected \"maxprob\", \"always\" or a predicate"
            ))),
            ConditionRepr::Predicate(p) => Ok(Condition::Predicate(p)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub id: String,
    pub from: String,
    pub to: String,
    #[serde(rename = "cond")]
    pub condition: Condition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDef {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ValueType,
}

impl FieldDef {
    pub fn new(name: impl Into<String>, ty: ValueType) -> Self {
        Self {
            name: name.into(),
            ty,
        }
    }
}

/// Stub rule: applies when every listed parameter's rendered value fully
/// matches its regex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubRule {
    pub when: BTreeMap<String, String>,
    pub response: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stub {
    #[serde(default)]
    pub rules: Vec<StubRule>,
    pub default: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSpec {
    pub name: String,
    #[serde(default)]
    pub params: Vec<FieldDef>,
    pub response_fields: Vec<FieldDef>,
    pub stub: Stub,
}

impl ApiSpec {
    pub fn field(&self, name: &str) -> Option<&FieldDef> {
        self.response_fields.iter().find(|f| f.name == name)
    }

    /// Every response the stub can produce: each rule's, then the default.
    pub fn possible_responses(&self) -> impl Iterator<Item = &BTreeMap<String, Value>> {
        self.stub
            .rules
            .iter()
            .map(|r| &r.response)
            .chain(std::iter::once(&self.stub.default))
    }

    /// Runs the stub table against the given parameter values. Rules with a
    /// pattern that does not compile never match.
    pub fn call(&self, params: &BTreeMap<String, Value>) -> BTreeMap<String, Value> {
        let matches = |rule: &StubRule| {
            rule.when.iter().all(|(param, pattern)| {
                let Some(v) = params.get(param) else {
                    return false;
                };
                Regex::new(&format!("^(?:{pattern})$"))
                    .map(|re| re.is_match(&v.render()))
                    .unwrap_or(false)
            })
        };
        self.stub
            .rules
            .iter()
            .find(|r| matches(r))
            .map(|r| r.response.clone())
            .unwrap_or_else(|| self.stub.default.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFlow {
    pub version: u64,
    pub scenario: String,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    #[serde(default)]
    pub api_specs: Vec<ApiSpec>,
}

pub const ROOT_ID: &str = "n0";

impl TaskFlow {
    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn edge(&self, id: &str) -> Option<&Edge> {
        self.edges.iter().find(|e| e.id == id)
    }

    pub fn root(&self) -> Option<&Node> {
        self.nodes.iter().find(|n| n.kind == NodeKind::Root)
    }

    /// Outgoing edges of a node, in document order.
    pub fn children(&self, id: &str) -> impl Iterator<Item = &Edge> {
        let id = id.to_string();
        self.edges.iter().filter(move |e| e.from == id)
    }

    pub fn parent_edge(&self, id: &str) -> Option<&Edge> {
        self.edges.iter().find(|e| e.to == id)
    }

    pub fn api_spec(&self, name: &str) -> Option<&ApiSpec> {
        self.api_specs.iter().find(|s| s.name == name)
    }

    /// Action-id paths from the root to every leaf and every `end` node,
    /// skipping ApiCall nodes.
    pub fn action_paths(&self) -> BTreeSet<Vec<String>> {
        let nodes: HashMap<&str, &Node> = self.nodes.iter().map(|n| (n.id.as_str(), n)).collect();
        let mut kids: HashMap<&str, Vec<&str>> = HashMap::new();
        for e in &self.edges {
            kids.entry(e.from.as_str()).or_default().push(e.to.as_str());
        }
        let mut out = BTreeSet::new();
        let Some(root) = self.root() else {
            return out;
        };
        let mut stack: Vec<(&str, Vec<String>)> = vec![(root.id.as_str(), Vec::new())];
        let mut visited: BTreeSet<&str> = BTreeSet::new();
        while let Some((id, path)) = stack.pop() {
            if !visited.insert(id) {
                continue;
            }
            let Some(node) = nodes.get(id) else { continue };
            let mut path = path;
            if let Some(a) = &node.action_id {
                path.push(a.clone());
            }
            let children = kids.get(id).map(Vec::as_slice).unwrap_or(&[]);
            if children.is_empty() || node.end {
                out.insert(path.clone());
            }
            for c in children {
                stack.push((c, path.clone()));
            }
        }
        out
    }

    /// Root-to-node action context ending at `id`, prefixed with `[SOS]`.
    pub fn context_of(&self, id: &str) -> Vec<String> {
        let mut ctx = Vec::new();
        let mut cur = id.to_string();
        let mut guard = self.nodes.len() + 1;
        while let Some(node) = self.node(&cur) {
            if let Some(a) = &node.action_id {
                ctx.push(a.clone());
            }
            match self.parent_edge(&cur) {
                Some(e) if guard > 0 => {
                    cur = e.from.clone();
                    guard -= 1;
                }
                _ => break,
            }
        }
        ctx.push(crate::standardize::SOS.to_string());
        ctx.reverse();
        ctx
    }

    fn next_node_id(&self) -> String {
        next_id(self.nodes.iter().map(|n| n.id.as_str()), 'n')
    }

    fn next_edge_id(&self) -> String {
        next_id(self.edges.iter().map(|e| e.id.as_str()), 'e')
    }

    pub fn to_json(&self) -> Result<String, TaskFlowError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(raw: &str) -> Result<Self, TaskFlowError> {
        Ok(serde_json::from_str(raw)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TaskFlowError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TaskFlowError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn next_id<'a>(ids: impl Iterator<Item = &'a str>, prefix: char) -> String {
    let max = ids
        .filter_map(|id| id.strip_prefix(prefix).and_then(|n| n.parse::<u64>().ok()))
        .max();
    format!("{prefix}{}", max.map_or(0, |m| m + 1))
}

/// Inserts samples by descending log-probability so that node ids are
/// deterministic. Shared prefixes share nodes; every new edge records the
/// model's conditional for its root path context.
pub fn build_taskflow(
    samples: &[ScoredSequence],
    model: &NGramModel,
    actions: &ActionCatalog,
    scenario: &str,
) -> Result<TaskFlow, TaskFlowError> {
    if samples.is_empty() {
        return Err(TaskFlowError::NoSamples);
    }
    let mut ordered: Vec<&ScoredSequence> = samples.iter().collect();
    ordered.sort_by(|a, b| {
        b.log_prob
            .total_cmp(&a.log_prob)
            .then_with(|| a.seq.actions.cmp(&b.seq.actions))
    });

    let mut tf = TaskFlow {
        version: 1,
        scenario: scenario.to_string(),
        nodes: vec![Node {
            id: ROOT_ID.to_string(),
            kind: NodeKind::Root,
            action_id: None,
            api: None,
            text: None,
            end: false,
        }],
        edges: Vec::new(),
        api_specs: Vec::new(),
    };
    let mut child_of: HashMap<(usize, String), usize> = HashMap::new();
    let ctx_len = model.order() - 1;

    for sample in ordered {
        let mut cur = 0usize;
        let mut path: Vec<String> = vec![crate::standardize::SOS.to_string()];
        for action in sample.seq.interior() {
            if let Some(&next) = child_of.get(&(cur, action.clone())) {
                cur = next;
                path.push(action.clone());
                continue;
            }
            let role = actions
                .role(action)
                .ok_or_else(|| TaskFlowError::UnknownAction(action.clone()))?;
            let prob: f64 = model.prob(&path[path.len().saturating_sub(ctx_len)..], action);
            if prob <= 0.0 {
                return Err(TaskFlowError::UnseenTransition {
                    action: action.clone(),
                });
            }
            let idx = tf.nodes.len();
            let node_id = format!("n{idx}");
            tf.nodes.push(Node {
                id: node_id.clone(),
                kind: NodeKind::for_role(role),
                action_id: Some(action.clone()),
                api: None,
                text: actions.canonical_text(action).map(str::to_string),
                end: false,
            });
            tf.edges.push(Edge {
                id: format!("e{}", tf.edges.len() + 1),
                from: tf.nodes[cur].id.clone(),
                to: node_id,
                condition: Condition::MaxProb,
                prob: Some(prob),
            });
            child_of.insert((cur, action.clone()), idx);
            cur = idx;
            path.push(action.clone());
        }
        tf.nodes[cur].end = true;
    }
    Ok(tf)
}

fn check_api_path(tf: &TaskFlow, extra: Option<&ApiSpec>, path: &str) -> Result<(), TaskFlowError> {
    let unknown = || TaskFlowError::UnknownPath(path.to_string());
    let (name, field) = parse_api_path(path).ok_or_else(unknown)?;
    let spec = extra
        .filter(|s| s.name == name)
        .or_else(|| tf.api_spec(name))
        .ok_or_else(unknown)?;
    spec.field(field).map(|_| ()).ok_or_else(unknown)
}

/// Splices an ApiCall node between a user action node and some of its
/// children; each rewired child is reached under its predicate.
pub fn insert_api_node(
    tf: &TaskFlow,
    parent_id: &str,
    spec: &ApiSpec,
    rewires: &[(String, Predicate)],
) -> Result<TaskFlow, TaskFlowError> {
    let parent = tf
        .node(parent_id)
        .ok_or_else(|| TaskFlowError::UnknownNode(parent_id.to_string()))?;
    if parent.kind != NodeKind::UserAction {
        return Err(TaskFlowError::NotUserAction(parent_id.to_string()));
    }
    if let Some(existing) = tf.api_spec(&spec.name) {
        if existing != spec {
            return Err(TaskFlowError::ApiSpecConflict(spec.name.clone()));
        }
    }
    for (child, pred) in rewires {
        if !tf.children(parent_id).any(|e| &e.to == child) {
            return Err(TaskFlowError::NotAChild {
                parent: parent_id.to_string(),
                child: child.clone(),
            });
        }
        check_api_path(tf, Some(spec), &pred.path)?;
    }

    let mut next = tf.clone();
    next.version = tf.version + 1;
    if next.api_spec(&spec.name).is_none() {
        next.api_specs.push(spec.clone());
    }
    let api_id = tf.next_node_id();
    next.nodes.push(Node {
        id: api_id.clone(),
        kind: NodeKind::ApiCall,
        action_id: None,
        api: Some(spec.name.clone()),
        text: None,
        end: false,
    });
    for (child, pred) in rewires {
        let edge = next
            .edges
            .iter_mut()
            .find(|e| e.from == parent_id && &e.to == child)
            .expect("checked above");
        edge.from = api_id.clone();
        edge.condition = Condition::Predicate(pred.clone());
    }
    next.edges.push(Edge {
        id: tf.next_edge_id(),
        from: parent_id.to_string(),
        to: api_id,
        condition: Condition::Always,
        prob: None,
    });

    let issues: Vec<Issue> = validate_taskflow(&next)
        .into_iter()
        .filter(|i| i.severity == Severity::Error)
        .collect();
    if !issues.is_empty() {
        return Err(TaskFlowError::Validation(issues));
    }
    Ok(next)
}

/// Replaces one edge's condition.
pub fn set_edge_condition(
    tf: &TaskFlow,
    edge_id: &str,
    condition: Condition,
) -> Result<TaskFlow, TaskFlowError> {
    if tf.edge(edge_id).is_none() {
        return Err(TaskFlowError::UnknownEdge(edge_id.to_string()));
    }
    if let Condition::Predicate(p) = &condition {
        check_api_path(tf, None, &p.path)?;
    }
    let mut next = tf.clone();
    next.version = tf.version + 1;
    if let Some(e) = next.edges.iter_mut().find(|e| e.id == edge_id) {
        e.condition = condition;
    }
    Ok(next)
}
