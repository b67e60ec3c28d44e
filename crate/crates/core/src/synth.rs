//! Seeded generators for action sets, TaskFlow trees and chat-log corpora.
//!
//! Used by the test suites, the demo commands and benchmarks. Every output is
//! a pure function of its seed.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::actions::{ActionCatalog, DialogueAction};
use crate::corpus::{Dialogue, Speaker, Utterance, UtteranceStore};
use crate::taskflow::{
    api_path, ApiSpec, Condition, Edge, FieldDef, Node, NodeKind, Predicate, Stub, StubRule, TaskFlow,
    ROOT_ID,
};
use crate::value::{CmpOp, Value, ValueType};

/// Actions with member utterances, independent of any clustering run.
#[derive(Debug, Clone, Default)]
pub struct ActionSet {
    pub actions: Vec<DialogueAction>,
    pub store: UtteranceStore,
    pub catalog: ActionCatalog,
}

impl ActionSet {
    /// The first text of each action is its canonical utterance.
    pub fn from_texts<I, T>(specs: I) -> Self
    where
        I: IntoIterator<Item = (String, Speaker, T)>,
        T: IntoIterator<Item = String>,
    {
        let mut set = ActionSet::default();
        for (id, role, texts) in specs {
            set.push(id, role, texts);
        }
        set
    }

    pub fn push(&mut self, id: String, role: Speaker, texts: impl IntoIterator<Item = String>) {
        let mut members = BTreeSet::new();
        let mut canonical: Option<(String, String)> = None;
        for (i, text) in texts.into_iter().enumerate() {
            let uid = format!("{id}#{i:03}");
            self.store.insert(Utterance {
                id: uid.clone(),
                dialogue_id: "lexicon".into(),
                turn_index: i,
                speaker: role,
                text: text.clone(),
            });
            members.insert(uid.clone());
            canonical.get_or_insert((uid, text));
        }
        let (canonical_id, text) = canonical.expect("action needs at least one utterance");
        let action = DialogueAction {
            id,
            role,
            name: text.clone(),
            canonical_id,
            member_ids: members,
        };
        self.catalog.insert(action.clone(), text);
        self.actions.push(action);
    }
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kl", "st", "tr",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

/// Lowercase nonsense words, never repeated within one generator.
pub struct WordGen {
    rng: ChaCha8Rng,
    used: BTreeSet<String>,
}

impl WordGen {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            used: BTreeSet::new(),
        }
    }

    pub fn word(&mut self) -> String {
        loop {
            let syllables = self.rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS[self.rng.random_range(0..ONSETS.len())]);
                w.push_str(NUCLEI[self.rng.random_range(0..NUCLEI.len())]);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    pub fn phrase(&mut self, words: usize) -> Vec<String> {
        (0..words).map(|_| self.word()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowShape {
    /// User turns along the longest path.
    pub max_depth: usize,
    pub max_branching: usize,
    /// Consecutive staff actions after a user action.
    pub max_staff_run: usize,
    /// Chance that a user action is followed by an API call with two
    /// predicate branches.
    pub api_rate: f64,
    /// Chance of a staff sibling that loses on probability.
    pub decoy_rate: f64,
    /// Chance that the flow opens with a staff greeting.
    pub greeting_rate: f64,
}

impl Default for FlowShape {
    fn default() -> Self {
        Self {
            max_depth: 3,
            max_branching: 3,
            max_staff_run: 2,
            api_rate: 0.3,
            decoy_rate: 0.2,
            greeting_rate: 0.3,
        }
    }
}

pub const STATUS_API: &str = "Check_Status";

/// The stub used by generated flows: user ids starting with 7 report
/// `locked = true`, all others `false`.
pub fn status_api() -> ApiSpec {
    ApiSpec {
        name: STATUS_API.into(),
        params: vec![FieldDef::new("user_id", ValueType::Integer)],
        response_fields: vec![FieldDef::new("locked", ValueType::Boolean)],
        stub: Stub {
            rules: vec![StubRule {
                when: [("user_id".to_string(), "7[0-9]*".to_string())].into(),
                response: [("locked".to_string(), Value::Bool(true))].into(),
            }],
            default: [("locked".to_string(), Value::Bool(false))].into(),
        },
    }
}

#[derive(Debug, Clone)]
pub struct RandomFlow {
    pub taskflow: TaskFlow,
    pub actions: ActionSet,
}

struct FlowBuilder {
    rng: ChaCha8Rng,
    words: WordGen,
    shape: FlowShape,
    tf: TaskFlow,
    actions: ActionSet,
    counts: BTreeMap<Speaker, usize>,
}

impl FlowBuilder {
    fn new_action(&mut self, role: Speaker, extra: Option<String>) -> (String, String) {
        let n = self.counts.entry(role).or_default();
        *n += 1;
        let id = format!("{}_{:03}", role.as_str(), n);
        let len = self.rng.random_range(3..=5);
        let mut text = self.words.phrase(len).join(" ");
        if let Some(extra) = extra {
            text.push(' ');
            text.push_str(&extra);
        }
        self.actions.push(id.clone(), role, [text.clone()]);
        (id, text)
    }

    fn node(&mut self, kind: NodeKind, action: Option<(String, String)>, api: Option<String>) -> String {
        let id = format!("n{}", self.tf.nodes.len());
        let (action_id, text) = action.map_or((None, None), |(a, t)| (Some(a), Some(t)));
        self.tf.nodes.push(Node {
            id: id.clone(),
            kind,
            action_id,
            api,
            text,
            end: false,
        });
        id
    }

    fn edge(&mut self, from: &str, to: &str, condition: Condition, prob: Option<f64>) {
        let id = format!("e{}", self.tf.edges.len() + 1);
        self.tf.edges.push(Edge {
            id,
            from: from.to_string(),
            to: to.to_string(),
            condition,
            prob,
        });
    }

    fn split(&mut self, n: usize) -> Vec<f64> {
        let w: Vec<f64> = (0..n).map(|_| self.rng.random_range(1.0..10.0)).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }

    /// User children of an await point.
    fn user_level(&mut self, parent: &str, depth: usize) {
        let b = self.rng.random_range(1..=self.shape.max_branching);
        let probs = self.split(b);
        for p in probs {
            let api = self.rng.random_bool(self.shape.api_rate);
            let extra = api.then(|| {
                let lead = if self.rng.random_bool(0.5) { 7 } else { self.rng.random_range(1..=6) };
                format!("user id {lead}{:03}", self.rng.random_range(0..1000))
            });
            let action = self.new_action(Speaker::User, extra);
            let user = self.node(NodeKind::UserAction, Some(action), None);
            self.edge(parent, &user, Condition::MaxProb, Some(p));
            if api {
                let call = self.node(NodeKind::ApiCall, None, Some(STATUS_API.into()));
                self.edge(&user, &call, Condition::Always, None);
                let field = api_path(STATUS_API, "locked");
                for (flag, prob) in [(true, 0.5), (false, 0.5)] {
                    let cond = Condition::Predicate(Predicate::new(field.clone(), CmpOp::Eq, flag));
                    self.staff_run(&call, cond, prob, depth);
                }
            } else {
                self.staff_run(&user, Condition::MaxProb, 1.0, depth);
            }
        }
    }

    fn staff_run(&mut self, parent: &str, first: Condition, prob: f64, depth: usize) {
        let run = self.rng.random_range(1..=self.shape.max_staff_run);
        let mut prev = parent.to_string();
        let mut cond = first;
        let mut p = prob;
        for _ in 0..run {
            let decoy = matches!(cond, Condition::MaxProb) && self.rng.random_bool(self.shape.decoy_rate);
            let (main_p, decoy_p) = if decoy {
                let q = self.rng.random_range(0.05..0.45);
                (p * (1.0 - q), p * q)
            } else {
                (p, 0.0)
            };
            let action = self.new_action(Speaker::Staff, None);
            let staff = self.node(NodeKind::StaffAction, Some(action), None);
            self.edge(&prev, &staff, cond.clone(), Some(main_p));
            if decoy {
                let action = self.new_action(Speaker::Staff, None);
                let other = self.node(NodeKind::StaffAction, Some(action), None);
                self.edge(&prev, &other, Condition::MaxProb, Some(decoy_p));
            }
            prev = staff;
            cond = Condition::MaxProb;
            p = 1.0;
        }
        if depth + 1 < self.shape.max_depth && self.rng.random_bool(0.7) {
            self.user_level(&prev, depth + 1);
        }
    }
}

/// A random valid TaskFlow whose every action has exactly one distinctive
/// utterance.
pub fn random_flow(seed: u64, shape: &FlowShape) -> RandomFlow {
    let mut b = FlowBuilder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        words: WordGen::new(seed ^ 0x5eed_5eed),
        shape: *shape,
        tf: TaskFlow {
            version: 1,
            scenario: format!("random-{seed}"),
            nodes: Vec::new(),
            edges: Vec::new(),
            api_specs: Vec::new(),
        },
        actions: ActionSet::default(),
        counts: BTreeMap::new(),
    };
    let root = b.node(NodeKind::Root, None, None);
    debug_assert_eq!(root, ROOT_ID);
    let mut await_at = root;
    if b.rng.random_bool(shape.greeting_rate) {
        let action = b.new_action(Speaker::Staff, None);
        let greet = b.node(NodeKind::StaffAction, Some(action), None);
        b.edge(ROOT_ID, &greet, Condition::MaxProb, Some(1.0));
        await_at = greet;
    }
    b.user_level(&await_at, 0);
    if b.tf.nodes.iter().any(|n| n.kind == NodeKind::ApiCall) {
        b.tf.api_specs.push(status_api());
    }
    RandomFlow {
        taskflow: b.tf,
        actions: b.actions,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusShape {
    pub user_actions: usize,
    pub staff_actions: usize,
    /// Total utterances to generate, approximately (whole dialogues only).
    pub utterances: usize,
    pub max_depth: usize,
    pub max_branching: usize,
    pub keywords: usize,
    /// Chance of dropping one keyword from a paraphrase.
    pub drop_rate: f64,
    pub max_fillers: usize,
}

impl Default for CorpusShape {
    fn default() -> Self {
        Self {
            user_actions: 12,
            staff_actions: 12,
            utterances: 2_000,
            max_depth: 3,
            max_branching: 3,
            keywords: 5,
            drop_rate: 0.3,
            max_fillers: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub dialogues: Vec<Dialogue>,
    /// Generating action of every utterance.
    pub truth: BTreeMap<String, String>,
    /// Keywords of every action.
    pub keywords: BTreeMap<String, Vec<String>>,
    /// The tree the dialogues were walked from. Nodes carry ground-truth
    /// action ids.
    pub flow: TaskFlow,
}

struct Story {
    /// (action id, children, child weights)
    nodes: Vec<(String, Vec<usize>, Vec<f64>)>,
}

/// Dialogues walked from a random ground-truth tree whose nodes draw actions
/// from fixed per-role pools. Each utterance is a noisy paraphrase of its
/// action's keywords.
pub fn synthetic_corpus(seed: u64, shape: &CorpusShape) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words = WordGen::new(seed.wrapping_add(1));
    let mut keywords = BTreeMap::new();
    let mut pool = BTreeMap::new();
    for (role, n) in [(Speaker::User, shape.user_actions), (Speaker::Staff, shape.staff_actions)] {
        let ids: Vec<String> = (1..=n).map(|i| format!("{}_{:03}", role.as_str(), i)).collect();
        for id in &ids {
            keywords.insert(id.clone(), words.phrase(shape.keywords));
        }
        pool.insert(role, ids);
    }
    let fillers = words.phrase(40);

    // ground-truth tree: user/staff alternation below the root, grown until
    // every pooled action is used at least once
    let mut story = Story {
        nodes: vec![(String::new(), Vec::new(), Vec::new())],
    };
    let mut unused: BTreeMap<Speaker, Vec<String>> = pool.clone();
    for ids in unused.values_mut() {
        ids.shuffle(&mut rng);
    }
    let mut pick = |rng: &mut ChaCha8Rng, role: Speaker, avoid: &BTreeSet<String>| -> String {
        if let Some(pos) = unused[&role].iter().position(|a| !avoid.contains(a)) {
            return unused.get_mut(&role).expect("role").remove(pos);
        }
        let ids = &pool[&role];
        loop {
            let a = &ids[rng.random_range(0..ids.len())];
            if !avoid.contains(a) || avoid.len() >= ids.len() {
                return a.clone();
            }
        }
    };
    let add = |story: &mut Story, parent: usize, action: String, rng: &mut ChaCha8Rng| -> usize {
        let idx = story.nodes.len();
        story.nodes.push((action, Vec::new(), Vec::new()));
        story.nodes[parent].1.push(idx);
        story.nodes[parent].2.push(rng.random_range(1.0..10.0));
        idx
    };
    let mut frontier_roots = 0usize;
    loop {
        let all_used = |n: &Story, role: Speaker| {
            let used: BTreeSet<&str> = n.nodes.iter().map(|x| x.0.as_str()).collect();
            pool[&role].iter().all(|a| used.contains(a.as_str()))
        };
        if frontier_roots > 0 && all_used(&story, Speaker::User) && all_used(&story, Speaker::Staff) {
            break;
        }
        frontier_roots += 1;
        let mut stack = vec![(0usize, 0usize)];
        while let Some((await_at, depth)) = stack.pop() {
            let b = rng.random_range(1..=shape.max_branching);
            let mut siblings: BTreeSet<String> = story.nodes[await_at]
                .1
                .iter()
                .map(|&c| story.nodes[c].0.clone())
                .collect();
            for _ in 0..b {
                let ua = pick(&mut rng, Speaker::User, &siblings);
                siblings.insert(ua.clone());
                let u = add(&mut story, await_at, ua, &mut rng);
                let run = rng.random_range(1..=2);
                let mut prev = u;
                for _ in 0..run {
                    let sa = pick(&mut rng, Speaker::Staff, &BTreeSet::new());
                    prev = add(&mut story, prev, sa, &mut rng);
                }
                if depth + 1 < shape.max_depth && rng.random_bool(0.6) {
                    stack.push((prev, depth + 1));
                }
            }
            if await_at == 0 {
                break;
            }
        }
    }

    let mut dialogues = Vec::new();
    let mut truth = BTreeMap::new();
    let mut total = 0usize;
    while total < shape.utterances {
        let did = format!("d{:06}", dialogues.len() + 1);
        let mut utterances = Vec::new();
        let mut cur = 0usize;
        loop {
            let (_, kids, weights) = &story.nodes[cur];
            if kids.is_empty() {
                break;
            }
            let sum: f64 = weights.iter().sum();
            let mut r = rng.random_range(0.0..sum);
            let mut next = kids[kids.len() - 1];
            for (k, w) in kids.iter().zip(weights) {
                if r < *w {
                    next = *k;
                    break;
                }
                r -= w;
            }
            cur = next;
            let action = &story.nodes[cur].0;
            let role = if action.starts_with("user") { Speaker::User } else { Speaker::Staff };
            let text = paraphrase(&mut rng, &keywords[action], &fillers, shape);
            let uid = format!("{did}_{:02}", utterances.len());
            truth.insert(uid.clone(), action.clone());
            utterances.push(Utterance {
                id: uid,
                dialogue_id: did.clone(),
                turn_index: utterances.len(),
                speaker: role,
                text,
            });
        }
        total += utterances.len();
        dialogues.push(Dialogue {
            id: did,
            scenario: "synthetic".into(),
            utterances,
        });
    }

    SyntheticCorpus {
        dialogues,
        truth,
        flow: story_taskflow(&story, &keywords),
        keywords,
    }
}

fn paraphrase(rng: &mut ChaCha8Rng, keywords: &[String], fillers: &[String], shape: &CorpusShape) -> String {
    let mut out: Vec<&str> = keywords.iter().map(String::as_str).collect();
    if out.len() > 2 && rng.random_bool(shape.drop_rate) {
        out.remove(rng.random_range(0..out.len()));
    }
    for _ in 0..rng.random_range(0..=shape.max_fillers) {
        let at = rng.random_range(0..=out.len());
        out.insert(at, &fillers[rng.random_range(0..fillers.len())]);
    }
    out.join(" ")
}

fn story_taskflow(story: &Story, keywords: &BTreeMap<String, Vec<String>>) -> TaskFlow {
    let mut tf = TaskFlow {
        version: 1,
        scenario: "synthetic".into(),
        nodes: Vec::new(),
        edges: Vec::new(),
        api_specs: Vec::new(),
    };
    for (i, (action, kids, weights)) in story.nodes.iter().enumerate() {
        let kind = if i == 0 {
            NodeKind::Root
        } else if action.starts_with("user") {
            NodeKind::UserAction
        } else {
            NodeKind::StaffAction
        };
        tf.nodes.push(Node {
            id: format!("n{i}"),
            kind,
            action_id: (i > 0).then(|| action.clone()),
            api: None,
            text: (i > 0).then(|| keywords[action].join(" ")),
            end: false,
        });
        let sum: f64 = weights.iter().sum();
        for (k, w) in kids.iter().zip(weights) {
            tf.edges.push(Edge {
                id: format!("e{}", tf.edges.len() + 1),
                from: format!("n{i}"),
                to: format!("n{k}"),
                condition: Condition::MaxProb,
                prob: Some(w / sum),
            });
        }
    }
    tf
}
