//! Structural and semantic checks over a [`TaskFlow`].

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{Condition, NodeKind, TaskFlow};
use crate::value::{Value, ValueType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueCode {
    DuplicateId,
    RootCount,
    MalformedNode,
    MissingText,
    DanglingEdge,
    MultipleParents,
    Unreachable,
    Cycle,
    EmptyApiCall,
    UnknownApi,
    UnknownPath,
    TypeMismatch,
    UnboundPredicate,
    OverlappingPredicates,
    InvalidApiSpec,
    InvalidProbability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub code: IssueCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge: Option<String>,
}

struct Issues(Vec<Issue>);

impl Issues {
    fn push(&mut self, severity: Severity, code: IssueCode, message: String) -> &mut Issue {
        self.0.push(Issue {
            severity,
            code,
            message,
            node: None,
            edge: None,
        });
        self.0.last_mut().expect("just pushed")
    }

    fn error(&mut self, code: IssueCode, message: String) -> &mut Issue {
        self.push(Severity::Error, code, message)
    }
}

impl Issue {
    fn at_node(&mut self, id: &str) -> &mut Self {
        self.node = Some(id.to_string());
        self
    }

    fn at_edge(&mut self, id: &str) -> &mut Self {
        self.edge = Some(id.to_string());
        self
    }
}

/// All problems found, errors and warnings alike. An empty result means the
/// tree is safe to execute.
pub fn validate_taskflow(tf: &TaskFlow) -> Vec<Issue> {
    let mut issues = Issues(Vec::new());
    check_specs(tf, &mut issues);
    check_nodes(tf, &mut issues);
    let parent = check_edges(tf, &mut issues);
    check_reachability(tf, &parent, &mut issues);
    check_conditions(tf, &parent, &mut issues);
    issues.0
}

fn check_specs(tf: &TaskFlow, issues: &mut Issues) {
    let mut names = BTreeSet::new();
    for spec in &tf.api_specs {
        if !names.insert(spec.name.as_str()) {
            issues.error(
                IssueCode::DuplicateId,
                format!("API spec {:?} is declared twice", spec.name),
            );
        }
        let mut fields = BTreeSet::new();
        for f in &spec.response_fields {
            if !fields.insert(f.name.as_str()) {
                issues.error(
                    IssueCode::InvalidApiSpec,
                    format!("API {:?} declares response field {:?} twice", spec.name, f.name),
                );
            }
        }
        let params: BTreeSet<&str> = spec.params.iter().map(|p| p.name.as_str()).collect();
        for (i, rule) in spec.stub.rules.iter().enumerate() {
            for (param, pattern) in &rule.when {
                if !params.contains(param.as_str()) {
                    issues.error(
                        IssueCode::InvalidApiSpec,
                        format!("API {:?} stub rule {i} tests undeclared parameter {param:?}", spec.name),
                    );
                }
                if regex::Regex::new(pattern).is_err() {
                    issues.error(
                        IssueCode::InvalidApiSpec,
                        format!("API {:?} stub rule {i} has invalid pattern {pattern:?}", spec.name),
                    );
                }
            }
        }
        for (label, response) in spec
            .stub
            .rules
            .iter()
            .enumerate()
            .map(|(i, r)| (format!("rule {i}"), &r.response))
            .chain(std::iter::once(("default".to_string(), &spec.stub.default)))
        {
            check_response(spec.name.as_str(), &label, response, &spec.response_fields, issues);
        }
    }
}

fn check_response(
    api: &str,
    label: &str,
    response: &BTreeMap<String, Value>,
    fields: &[super::FieldDef],
    issues: &mut Issues,
) {
    for f in fields {
        match response.get(&f.name) {
            None => {
                issues.error(
                    IssueCode::InvalidApiSpec,
                    format!("API {api:?} stub {label} lacks field {:?}", f.name),
                );
            }
            Some(v) if !f.ty.admits(v) => {
                issues.error(
                    IssueCode::InvalidApiSpec,
                    format!("API {api:?} stub {label} field {:?} is not of type {:?}", f.name, f.ty),
                );
            }
            Some(_) => {}
        }
    }
    for key in response.keys() {
        if !fields.iter().any(|f| &f.name == key) {
            issues.error(
                IssueCode::InvalidApiSpec,
                format!("API {api:?} stub {label} returns undeclared field {key:?}"),
            );
        }
    }
}

fn check_nodes(tf: &TaskFlow, issues: &mut Issues) {
    let mut seen = BTreeSet::new();
    let mut roots = 0;
    for n in &tf.nodes {
        if !seen.insert(n.id.as_str()) {
            issues
                .error(IssueCode::DuplicateId, format!("node id {:?} is used twice", n.id))
                .at_node(&n.id);
        }
        let malformed = match n.kind {
            NodeKind::Root => {
                roots += 1;
                n.action_id.is_some() || n.api.is_some()
            }
            NodeKind::UserAction | NodeKind::StaffAction => n.action_id.is_none() || n.api.is_some(),
            NodeKind::ApiCall => n.action_id.is_some() || n.api.is_none(),
        };
        if malformed {
            issues
                .error(
                    IssueCode::MalformedNode,
                    format!("node {:?} has fields inconsistent with its kind", n.id),
                )
                .at_node(&n.id);
        }
        if n.kind == NodeKind::StaffAction && n.text.as_deref().is_none_or(str::is_empty) {
            issues
                .error(IssueCode::MissingText, format!("staff node {:?} has no response text", n.id))
                .at_node(&n.id);
        }
        if let Some(api) = &n.api {
            if tf.api_spec(api).is_none() {
                issues
                    .error(IssueCode::UnknownApi, format!("node {:?} calls undeclared API {api:?}", n.id))
                    .at_node(&n.id);
            }
        }
    }
    if roots != 1 {
        issues.error(IssueCode::RootCount, format!("expected exactly one root node, found {roots}"));
    }
}

/// Returns the parent edge index of every node that has one.
fn check_edges<'a>(tf: &'a TaskFlow, issues: &mut Issues) -> HashMap<&'a str, usize> {
    let ids: BTreeSet<&str> = tf.nodes.iter().map(|n| n.id.as_str()).collect();
    let mut edge_ids = BTreeSet::new();
    let mut parent: HashMap<&str, usize> = HashMap::new();
    for (i, e) in tf.edges.iter().enumerate() {
        if !edge_ids.insert(e.id.as_str()) {
            issues
                .error(IssueCode::DuplicateId, format!("edge id {:?} is used twice", e.id))
                .at_edge(&e.id);
        }
        for end in [&e.from, &e.to] {
            if !ids.contains(end.as_str()) {
                issues
                    .error(
                        IssueCode::DanglingEdge,
                        format!("edge {:?} refers to missing node {end:?}", e.id),
                    )
                    .at_edge(&e.id);
            }
        }
        if let Some(p) = e.prob {
            if !(p > 0.0 && p <= 1.0) {
                issues
                    .error(
                        IssueCode::InvalidProbability,
                        format!("edge {:?} has probability {p} outside (0, 1]", e.id),
                    )
                    .at_edge(&e.id);
            }
        }
        if parent.insert(e.to.as_str(), i).is_some() {
            issues
                .error(
                    IssueCode::MultipleParents,
                    format!("node {:?} has more than one parent", e.to),
                )
                .at_node(&e.to);
        }
    }
    parent
}

fn check_reachability(tf: &TaskFlow, parent: &HashMap<&str, usize>, issues: &mut Issues) {
    let Some(root) = tf.root() else { return };
    if let Some(&i) = parent.get(root.id.as_str()) {
        issues
            .error(IssueCode::Cycle, format!("root has incoming edge {:?}", tf.edges[i].id))
            .at_edge(&tf.edges[i].id);
    }
    let mut kids: HashMap<&str, Vec<&str>> = HashMap::new();
    for e in &tf.edges {
        kids.entry(e.from.as_str()).or_default().push(e.to.as_str());
    }
    let mut reached = BTreeSet::new();
    let mut stack = vec![root.id.as_str()];
    while let Some(id) = stack.pop() {
        if !reached.insert(id) {
            issues
                .error(IssueCode::Cycle, format!("node {id:?} is reached twice"))
                .at_node(id);
            continue;
        }
        stack.extend(kids.get(id).into_iter().flatten().copied());
    }
    for n in &tf.nodes {
        if !reached.contains(n.id.as_str()) {
            issues
                .error(IssueCode::Unreachable, format!("node {:?} is not reachable from the root", n.id))
                .at_node(&n.id);
        }
        if n.kind == NodeKind::ApiCall && !kids.contains_key(n.id.as_str()) {
            issues
                .error(IssueCode::EmptyApiCall, format!("API node {:?} has no outgoing edges", n.id))
                .at_node(&n.id);
        }
    }
}

/// Names of APIs called on the path from the root down to (and including) `id`.
fn bound_apis<'a>(tf: &'a TaskFlow, parent: &HashMap<&str, usize>, id: &'a str) -> BTreeSet<&'a str> {
    let mut out = BTreeSet::new();
    let mut cur = id;
    for _ in 0..=tf.nodes.len() {
        if let Some(api) = tf.node(cur).and_then(|n| n.api.as_deref()) {
            out.insert(api);
        }
        match parent.get(cur) {
            Some(&i) => cur = tf.edges[i].from.as_str(),
            None => break,
        }
    }
    out
}

fn check_conditions(tf: &TaskFlow, parent: &HashMap<&str, usize>, issues: &mut Issues) {
    let mut by_parent: BTreeMap<&str, Vec<&super::Edge>> = BTreeMap::new();
    for e in &tf.edges {
        by_parent.entry(e.from.as_str()).or_default().push(e);
        let Condition::Predicate(p) = &e.condition else {
            continue;
        };
        let field = p
            .api_field()
            .and_then(|(api, f)| tf.api_spec(api).map(|s| (api, s.field(f))));
        let (api, ty) = match field {
            Some((api, Some(f))) => (api, f.ty),
            _ => {
                issues
                    .error(
                        IssueCode::UnknownPath,
                        format!("edge {:?} tests unknown path {:?}", e.id, p.path),
                    )
                    .at_edge(&e.id);
                continue;
            }
        };
        let probe = match ty {
            ValueType::Boolean => Value::Bool(false),
            ValueType::Integer | ValueType::Timestamp => Value::Int(0),
            ValueType::Number => Value::Float(0.0),
            ValueType::String => Value::Str(String::new()),
        };
        if let Err(err) = probe.compare(p.op, &p.literal) {
            issues
                .error(IssueCode::TypeMismatch, format!("edge {:?}: {err}", e.id))
                .at_edge(&e.id);
        }
        if !bound_apis(tf, parent, &e.from).contains(api) {
            issues
                .push(
                    Severity::Warning,
                    IssueCode::UnboundPredicate,
                    format!("edge {:?} tests {:?} before any call to {api:?}", e.id, p.path),
                )
                .at_edge(&e.id);
        }
    }

    for (from, edges) in by_parent {
        let preds: Vec<(&super::Edge, &super::Predicate)> = edges
            .iter()
            .filter_map(|e| match &e.condition {
                Condition::Predicate(p) => Some((*e, p)),
                _ => None,
            })
            .collect();
        for (i, (a, pa)) in preds.iter().enumerate() {
            for (b, pb) in &preds[i + 1..] {
                if pa == pb {
                    issues
                        .error(
                            IssueCode::OverlappingPredicates,
                            format!("edges {:?} and {:?} under {from:?} test the same predicate", a.id, b.id),
                        )
                        .at_edge(&b.id);
                }
            }
        }
        let Some(api) = tf.node(from).and_then(|n| n.api.as_deref()) else {
            continue;
        };
        let Some(spec) = tf.api_spec(api) else { continue };
        for response in spec.possible_responses() {
            let satisfied: Vec<&str> = preds
                .iter()
                .filter(|(_, p)| {
                    p.api_field()
                        .filter(|(n, _)| *n == api)
                        .and_then(|(_, f)| response.get(f))
                        .is_some_and(|v| v.compare(p.op, &p.literal).unwrap_or(false))
                })
                .map(|(e, _)| e.id.as_str())
                .collect();
            if satisfied.len() > 1 {
                issues
                    .error(
                        IssueCode::OverlappingPredicates,
                        format!(
                            "edges {} under {from:?} are all satisfied by one {api:?} response",
                            satisfied.join(", ")
                        ),
                    )
                    .at_node(from);
            }
        }
    }
    issues.0.dedup();
}
