//! Retrieval trigger policies and the two-pass
//! generate, retrieve, augment, regenerate pipeline for one task.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::api_index::{ApiIndex, Provider};
use crate::augmenter::{augment, AugmentationDesign, TokenCounter};
use crate::gateway::{api_confidence, Gateway, GatewayError, GenerationRequest, GenerationResult};
use crate::invocation::{extract_first_call, validate, CallCandidate, ModeSelection, Verdict};
use crate::retriever::{tokenize, Bm25Retriever, InclusionPlan, RetrieverConfig};

pub const DEFAULT_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum Policy {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "dag")]
    Dag,
    #[serde(rename = "index-lookup")]
    IndexLookup,
    #[serde(rename = "confidence")]
    ConfidenceThreshold { threshold: f64 },
    #[serde(rename = "dag++")]
    DagPlusPlus { threshold: f64 },
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("unknown policy `{0}` (expected base, dag, index-lookup, confidence or dag++)")]
    Unknown(String),
    #[error("threshold must lie in [0, 1], got {0}")]
    Threshold(f64),
    #[error("policy `{0}` takes no threshold")]
    UnusedThreshold(String),
}

impl Policy {
    pub const NAMES: [&'static str; 5] = ["base", "dag", "index-lookup", "confidence", "dag++"];

    /// Builds a policy from its CLI name. Threshold policies default to 0.8.
    pub fn from_name(name: &str, threshold: Option<f64>) -> Result<Policy, PolicyError> {
        let theta = threshold.unwrap_or(DEFAULT_THRESHOLD);
        if !(0.0..=1.0).contains(&theta) {
            return Err(PolicyError::Threshold(theta));
        }
        let policy = match name {
            "base" => Policy::Base,
            "dag" => Policy::Dag,
            "index-lookup" => Policy::IndexLookup,
            "confidence" => Policy::ConfidenceThreshold { threshold: theta },
            "dag++" => Policy::DagPlusPlus { threshold: theta },
            other => return Err(PolicyError::Unknown(other.to_string())),
        };
        if threshold.is_some() && policy.threshold().is_none() {
            return Err(PolicyError::UnusedThreshold(name.to_string()));
        }
        Ok(policy)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Policy::Base => "base",
            Policy::Dag => "dag",
            Policy::IndexLookup => "index-lookup",
            Policy::ConfidenceThreshold { .. } => "confidence",
            Policy::DagPlusPlus { .. } => "dag++",
        }
    }

    pub fn threshold(&self) -> Option<f64> {
        match self {
            Policy::ConfidenceThreshold { threshold } | Policy::DagPlusPlus { threshold } => Some(*threshold),
            _ => None,
        }
    }

    pub fn needs_confidence(&self) -> bool {
        self.threshold().is_some()
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.threshold() {
            Some(t) => write!(f, "{}(threshold={t})", self.name()),
            None => f.write_str(self.name()),
        }
    }
}

/// Trigger decision plus the warning recorded when a confidence policy had
/// to fall back to index lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub triggered: bool,
    pub warning: Option<String>,
}

pub fn decide(
    policy: &Policy,
    first_call: Option<&CallCandidate>,
    confidence: Option<f64>,
    index: &ApiIndex,
) -> Decision {
    let not_in_index = first_call.is_none_or(|c| !index.contains(c.terminal_name()));
    let below = |theta: f64| match (first_call, confidence) {
        (None, _) => Some(true),
        (Some(_), Some(c)) => Some(c < theta),
        (Some(_), None) => None,
    };
    let fallback = || {
        Some(format!(
            "{}: confidence unavailable, falling back to index lookup",
            policy.name()
        ))
    };
    let (triggered, warning) = match *policy {
        Policy::Base => (false, None),
        Policy::Dag => (true, None),
        Policy::IndexLookup => (not_in_index, None),
        Policy::ConfidenceThreshold { threshold } => match below(threshold) {
            Some(b) => (b, None),
            None => (not_in_index, fallback()),
        },
        Policy::DagPlusPlus { threshold } => match below(threshold) {
            Some(b) => (not_in_index || b, None),
            None => (not_in_index, fallback()),
        },
    };
    Decision { triggered, warning }
}

/// Whether to retrieve for this first pass. See [`decide`] for the fallback
/// rule when confidence is missing.
pub fn should_retrieve(
    policy: &Policy,
    first_call: Option<&CallCandidate>,
    confidence: Option<f64>,
    index: &ApiIndex,
) -> bool {
    let d = decide(policy, first_call, confidence, index);
    if let Some(w) = &d.warning {
        log::warn!("{w}");
    }
    d.triggered
}

/// What the pipeline needs to know about a task.
#[derive(Debug, Clone, Copy)]
pub struct TaskInput<'a> {
    pub id: &'a str,
    pub provider: Provider,
    pub prompt: &'a str,
    pub target_apis: &'a [String],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTrace {
    pub task_id: String,
    pub first_pass: Option<GenerationResult>,
    pub first_call: Option<CallCandidate>,
    pub confidence: Option<f64>,
    pub triggered: bool,
    pub query: Vec<String>,
    pub retrieved_doc_names: Vec<String>,
    pub augmentation_tokens: usize,
    pub final_pass: Option<GenerationResult>,
    pub verdict: Option<Verdict>,
    pub warnings: Vec<String>,
    /// Set when the task could not be completed; such traces carry no verdict.
    pub error: Option<String>,
}

impl TaskTrace {
    fn new(task_id: &str) -> Self {
        Self {
            task_id: task_id.to_string(),
            first_pass: None,
            first_call: None,
            confidence: None,
            triggered: false,
            query: vec![],
            retrieved_doc_names: vec![],
            augmentation_tokens: 0,
            final_pass: None,
            verdict: None,
            warnings: vec![],
            error: None,
        }
    }

    pub fn is_errored(&self) -> bool {
        self.error.is_some()
    }

    pub fn is_valid(&self) -> bool {
        self.verdict.as_ref().is_some_and(|v| v.valid)
    }
}

/// Shared, read-only state for running tasks.
pub struct Pipeline<'a> {
    pub index: &'a ApiIndex,
    pub retriever: &'a Bm25Retriever,
    pub plan: &'a InclusionPlan,
    pub retriever_config: &'a RetrieverConfig,
    pub design: AugmentationDesign,
    pub gateway: &'a Gateway,
    pub counter: &'a dyn TokenCounter,
    pub modes: ModeSelection,
    pub max_new_tokens: usize,
}

/// Tokens of the last `#` comment line of the prompt.
pub fn fallback_query(prompt: &str) -> Vec<String> {
    prompt
        .lines()
        .rev()
        .filter_map(|l| l.trim_start().strip_prefix('#'))
        .map(tokenize)
        .find(|t| !t.is_empty())
        .unwrap_or_default()
}

impl Pipeline<'_> {
    fn request(&self, task: &TaskInput<'_>, prompt: String, pass: u32) -> GenerationRequest {
        GenerationRequest {
            prompt,
            max_new_tokens: self.max_new_tokens,
            want_logprobs: false,
            system_prompt: None,
            task_id: Some(task.id.to_string()),
            pass,
        }
    }

    /// Runs one task. Failures end up in `trace.error` rather than aborting.
    pub fn run_task(&self, task: &TaskInput<'_>, policy: &Policy) -> TaskTrace {
        let mut trace = TaskTrace::new(task.id);
        if let Err(e) = self.run_into(task, policy, &mut trace) {
            trace.error = Some(e);
        }
        trace
    }

    fn run_into(&self, task: &TaskInput<'_>, policy: &Policy, trace: &mut TaskTrace) -> Result<(), String> {
        let gw = |e: GatewayError| format!("backend: {e}");
        let first = self
            .gateway
            .generate(&self.request(task, task.prompt.to_string(), 1))
            .map_err(gw)?;
        let call = extract_first_call(&first.text);
        if let Some(c) = &call {
            match api_confidence(&first, c.span) {
                Ok(conf) => trace.confidence = Some(conf),
                Err(e) if policy.needs_confidence() => trace.warnings.push(format!("confidence: {e}")),
                Err(_) => {}
            }
        }
        trace.first_pass = Some(first.clone());
        trace.first_call = call.clone();

        let decision = decide(policy, call.as_ref(), trace.confidence, self.index);
        if let Some(w) = decision.warning {
            log::warn!("task {}: {w}", task.id);
            trace.warnings.push(w);
        }
        trace.triggered = decision.triggered;

        let final_pass = if decision.triggered {
            let query = match &call {
                Some(c) => tokenize(c.terminal_name()),
                None => fallback_query(task.prompt),
            };
            if query.is_empty() {
                trace.warnings.push("empty retrieval query".into());
            }
            let include = self
                .plan
                .bit(task.id)
                .ok_or_else(|| format!("task `{}` has no entry in the inclusion plan", task.id))?;
            let docs = self
                .retriever
                .precision_retrieve(task.target_apis, task.provider, &query, self.retriever_config, include)
                .map_err(|e| format!("retrieval: {e}"))?;
            let specs: Vec<_> = docs.iter().map(|d| d.spec).collect();
            let augmented = augment(task.prompt, &specs, self.design, self.counter);
            trace.query = query;
            trace.retrieved_doc_names = augmented.doc_names.clone();
            trace.augmentation_tokens = augmented.augmentation_token_count;
            self.gateway
                .generate(&self.request(task, augmented.text, 2))
                .map_err(gw)?
        } else {
            first
        };

        let final_call = extract_first_call(&final_pass.text);
        trace.final_pass = Some(final_pass);
        let verdict = validate(final_call.as_ref(), task.target_apis, self.index, self.modes)
            .map_err(|e| format!("validation: {e}"))?;
        trace.verdict = Some(verdict);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::api_index::{build_index, ApiSpec};
    use crate::augmenter::WordCounter;
    use crate::gateway::{MockBackend, RetryPolicy};
    use crate::retriever::{plan_inclusions, Bm25Params};
    use std::sync::Arc;

    fn spec(name: &str, req: &[&str]) -> ApiSpec {
        ApiSpec {
            provider: Provider::Aws,
            service: "sqs".into(),
            name: name.into(),
            required_params: req.iter().map(|s| s.to_string()).collect(),
            optional_params: vec![],
            description: format!("Does {name}."),
            full_doc: String::new(),
        }
    }

    fn index() -> ApiIndex {
        build_index(vec![
            spec("delete_message", &["QueueUrl", "ReceiptHandle"]),
            spec("send_message", &["QueueUrl", "MessageBody"]),
            spec("list_queues", &[]),
        ])
        .unwrap()
    }

    fn call(text: &str) -> CallCandidate {
        extract_first_call(text).unwrap()
    }

    #[test]
    fn names_and_thresholds() {
        assert_eq!(Policy::from_name("dag++", None).unwrap(), Policy::DagPlusPlus { threshold: 0.8 });
        assert_eq!(
            Policy::from_name("confidence", Some(0.3)).unwrap(),
            Policy::ConfidenceThreshold { threshold: 0.3 }
        );
        assert_eq!(Policy::from_name("base", Some(0.5)), Err(PolicyError::UnusedThreshold("base".into())));
        assert_eq!(Policy::from_name("dag++", Some(1.5)), Err(PolicyError::Threshold(1.5)));
        assert!(Policy::from_name("always", None).is_err());
        for n in Policy::NAMES {
            assert_eq!(Policy::from_name(n, None).unwrap().name(), n);
        }
        let j = serde_json::to_string(&Policy::DagPlusPlus { threshold: 0.8 }).unwrap();
        assert_eq!(j, r#"{"variant":"dag++","threshold":0.8}"#);
    }

    #[test]
    fn dag_plus_plus_examples() {
        let idx = index();
        let p = Policy::DagPlusPlus { threshold: 0.8 };
        let known = call("c.delete_message(QueueUrl=1)");
        let unknown = call("c.delete_msg(QueueUrl=1)");
        assert!(!should_retrieve(&p, Some(&known), Some(0.9), &idx));
        assert!(should_retrieve(&p, Some(&unknown), Some(0.95), &idx));
        assert!(should_retrieve(&p, Some(&known), Some(0.5), &idx));
        assert!(should_retrieve(&p, None, None, &idx));
    }

    #[test]
    fn simple_policies() {
        let idx = index();
        let known = call("c.delete_message()");
        let unknown = call("c.nope()");
        assert!(!should_retrieve(&Policy::Base, Some(&unknown), None, &idx));
        assert!(should_retrieve(&Policy::Dag, Some(&known), Some(1.0), &idx));
        assert!(!should_retrieve(&Policy::IndexLookup, Some(&known), Some(0.1), &idx));
        assert!(should_retrieve(&Policy::IndexLookup, Some(&unknown), Some(1.0), &idx));
        assert!(should_retrieve(&Policy::IndexLookup, None, None, &idx));
        let conf = Policy::ConfidenceThreshold { threshold: 0.8 };
        assert!(!should_retrieve(&conf, Some(&unknown), Some(0.8), &idx));
        assert!(should_retrieve(&conf, Some(&known), Some(0.79), &idx));
    }

    #[test]
    fn missing_confidence_falls_back_to_index_lookup() {
        let idx = index();
        let p = Policy::DagPlusPlus { threshold: 0.8 };
        let d = decide(&p, Some(&call("c.delete_message()")), None, &idx);
        assert!(!d.triggered);
        assert!(d.warning.is_some());
        let d = decide(&p, Some(&call("c.nope()")), None, &idx);
        assert!(d.triggered);
        let c = Policy::ConfidenceThreshold { threshold: 0.8 };
        assert!(decide(&c, Some(&call("c.nope()")), None, &idx).triggered);
    }

    #[test]
    fn fallback_query_uses_last_comment() {
        let prompt = "import boto3\n# remove the processed message\nclient = boto3.client('sqs')\n#\n";
        assert_eq!(fallback_query(prompt), vec!["remove", "the", "processed", "message"]);
        assert!(fallback_query("x = 1").is_empty());
    }

    struct Fixture {
        index: ApiIndex,
        retriever: Bm25Retriever,
        plan: InclusionPlan,
        config: RetrieverConfig,
        gateway: Gateway,
    }

    fn fixture(script: &str, include: bool) -> Fixture {
        let index = index();
        let retriever = Bm25Retriever::new(&index, Bm25Params::default());
        let plan = plan_inclusions(&["t1"], if include { 1.0 } else { 0.0 }, 0).unwrap();
        let backend = MockBackend::from_json(script).unwrap();
        Fixture {
            index,
            retriever,
            plan,
            config: RetrieverConfig {
                k: 1,
                precision_x: if include { 1.0 } else { 0.0 },
                ..RetrieverConfig::default()
            },
            gateway: Gateway::new(Arc::new(backend), RetryPolicy::none()),
        }
    }

    impl Fixture {
        fn pipeline(&self) -> Pipeline<'_> {
            Pipeline {
                index: &self.index,
                retriever: &self.retriever,
                plan: &self.plan,
                retriever_config: &self.config,
                design: AugmentationDesign::DescriptionPlusSpecification,
                gateway: &self.gateway,
                counter: &WordCounter,
                modes: ModeSelection::ByProvider,
                max_new_tokens: 256,
            }
        }
    }

    const PROMPT: &str = "import boto3\nsqs = boto3.client('sqs')\n# delete the message\nsqs.";
    const TARGETS: &[&str] = &["delete_message"];

    fn task<'a>(targets: &'a [String]) -> TaskInput<'a> {
        TaskInput {
            id: "t1",
            provider: Provider::Aws,
            prompt: PROMPT,
            target_apis: targets,
        }
    }

    fn targets() -> Vec<String> {
        TARGETS.iter().map(|s| s.to_string()).collect()
    }

    const SCRIPT: &str = r#"{"entries": [
        {"match": "t1", "pass": 1, "completion": "remove_msg(QueueUrl=u)",
         "token_pieces": ["remove", "_msg", "(QueueUrl=u)"], "logprobs": [-0.1, -2.0, -0.1]},
        {"match": "t1", "pass": 2, "completion": "delete_message(QueueUrl=u, ReceiptHandle=h)",
         "token_pieces": ["delete_message", "(QueueUrl=u, ReceiptHandle=h)"], "logprobs": [-0.01, -0.01]}
    ]}"#;

    #[test]
    fn base_policy_keeps_first_pass() {
        let f = fixture(SCRIPT, true);
        let t = targets();
        let trace = f.pipeline().run_task(&task(&t), &Policy::Base);
        assert!(!trace.triggered);
        assert_eq!(trace.first_pass, trace.final_pass);
        assert!(trace.retrieved_doc_names.is_empty());
        assert!(!trace.is_valid());
        assert_eq!(trace.verdict.unwrap().category, crate::invocation::Category::NonExistingApi);
    }

    #[test]
    fn dag_with_inclusion_augments_and_recovers() {
        let f = fixture(SCRIPT, true);
        let t = targets();
        let trace = f.pipeline().run_task(&task(&t), &Policy::Dag);
        assert!(trace.triggered, "{trace:?}");
        assert_eq!(trace.query, vec!["remove", "msg"]);
        assert_eq!(trace.retrieved_doc_names, vec!["delete_message"]);
        assert!(trace.augmentation_tokens > 0);
        assert!(trace.is_valid(), "{trace:?}");
        let conf = trace.confidence.unwrap();
        assert!((conf - (-2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn pass_two_prompt_carries_specification_block() {
        // the pass-2 entry only matches when the augmented prompt holds the block
        let script = r#"{"entries": [
            {"match": "t1", "pass": 1, "completion": "remove_msg(1)"},
            {"match": "delete_message\nDescription: Does delete_message.\nRequired arguments: QueueUrl, ReceiptHandle\nOptional arguments: none", "pass": 2,
             "completion": "delete_message(QueueUrl=u, ReceiptHandle=h)"}
        ]}"#;
        let f = fixture(script, true);
        let t = targets();
        let trace = f.pipeline().run_task(&task(&t), &Policy::Dag);
        assert!(trace.is_valid(), "{trace:?}");
    }

    #[test]
    fn excluded_target_is_never_retrieved() {
        let f = fixture(SCRIPT, false);
        let t = targets();
        let trace = f.pipeline().run_task(&task(&t), &Policy::Dag);
        assert!(trace.triggered);
        assert!(!trace.retrieved_doc_names.contains(&"delete_message".to_string()));
    }

    #[test]
    fn confident_in_index_first_pass_is_kept() {
        let script = r#"[{"match": "t1", "completion": "delete_message(QueueUrl=u)",
            "token_pieces": ["delete_message", "(QueueUrl=u)"], "logprobs": [-0.01, -0.5]}]"#;
        let f = fixture(script, true);
        let t = targets();
        let pp = f.pipeline().run_task(&task(&t), &Policy::DagPlusPlus { threshold: 0.8 });
        assert!(!pp.triggered);
        assert_eq!(pp.first_pass, pp.final_pass);
        let base = f.pipeline().run_task(&task(&t), &Policy::Base);
        assert_eq!(serde_json::to_string(&pp).unwrap(), serde_json::to_string(&base).unwrap());
    }

    #[test]
    fn backend_errors_become_errored_traces() {
        let f = fixture(r#"[{"match": "unrelated", "completion": "x()"}]"#, true);
        let t = targets();
        let trace = f.pipeline().run_task(&task(&t), &Policy::Dag);
        assert!(trace.is_errored());
        assert!(trace.verdict.is_none());
    }

    #[test]
    fn no_logprobs_under_confidence_policy_warns() {
        let f = fixture(r#"[{"match": "t1", "completion": "delete_message(QueueUrl=u)"}]"#, true);
        let t = targets();
        let trace = f.pipeline().run_task(&task(&t), &Policy::ConfidenceThreshold { threshold: 0.8 });
        assert!(!trace.triggered);
        assert!(trace.confidence.is_none());
        assert_eq!(trace.warnings.len(), 2, "{:?}", trace.warnings);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn trigger_monotone_in_threshold(conf in 0.0f64..=1.0, lo in 0.0f64..=1.0, hi in 0.0f64..=1.0, known: bool) {
                let idx = index();
                let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
                let c = call(if known { "delete_message()" } else { "nope()" });
                for make in [|t| Policy::ConfidenceThreshold { threshold: t }, |t| Policy::DagPlusPlus { threshold: t }] {
                    if should_retrieve(&make(lo), Some(&c), Some(conf), &idx) {
                        prop_assert!(should_retrieve(&make(hi), Some(&c), Some(conf), &idx));
                    }
                }
            }
        }
    }
}
