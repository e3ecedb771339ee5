mod common;

use common::{arb_spec, fixture, RandomSpec};
use genaibench::config::{
    parse_config, parse_config_file, to_yaml, validate_spec, AppKind, ConfigError, Device, Slo, ViolationKind,
};
use proptest::prelude::*;

#[test]
fn content_creation_workflow() {
    let spec = parse_config_file(fixture("content_creation.yaml")).unwrap();
    assert!(validate_spec(&spec).is_empty());
    assert_eq!(spec.tasks.len(), 5);
    assert_eq!(spec.workflow.len(), 5);

    let analysis = spec.node("analysis").unwrap();
    assert!(analysis.background);
    assert_eq!(spec.task_for(analysis).unwrap().app_kind, AppKind::DeepResearch);
    let outline = spec.node("outline").unwrap();
    assert_eq!(outline.depend_on, ["brainstorm", "analysis"]);
    assert!(!outline.background);

    let slo = |node: &str| spec.task_for(spec.node(node).unwrap()).unwrap().slo;
    assert_eq!(slo("brainstorm"), Slo::LatencyPair { ttft: 1.0, tpot: 0.25 });
    assert_eq!(slo("outline"), Slo::LatencyPair { ttft: 1.0, tpot: 0.25 });
    assert_eq!(slo("cover_art"), Slo::StepTime(1.0));
    assert_eq!(slo("generate_captions"), Slo::SegmentTime(2.0));
    assert_eq!(slo("analysis"), Slo::None);

    let brainstorm = spec.task_for(spec.node("brainstorm").unwrap()).unwrap();
    assert_eq!(brainstorm.num_requests, 10);
    assert_eq!(brainstorm.model.as_deref(), Some("openai/meta-llama/Llama-3.2-3B-Instruct"));
    let art = spec.task_for(spec.node("cover_art").unwrap()).unwrap();
    assert_eq!(art.model.as_deref(), Some("stable-diffusion-3.5-medium-turbo"));
    assert!(spec.tasks.values().all(|t| t.mps_share == 100 && t.device == Device::Gpu));
}

#[test]
fn two_document_workflow_with_cpu_task() {
    let spec = parse_config_file(fixture("two_documents.yaml")).unwrap();
    assert!(validate_spec(&spec).is_empty());
    assert_eq!(spec.tasks.len(), 3);
    let ids: Vec<&str> = spec.workflow.iter().map(|n| n.node_id.as_str()).collect();
    assert_eq!(ids, ["analysis_1", "cover_art", "analysis_2", "generate_captions"]);
    assert_eq!(spec.node("generate_captions").unwrap().depend_on, ["cover_art", "analysis_2"]);
    let a1 = spec.task_for(spec.node("analysis_1").unwrap()).unwrap();
    let a2 = spec.task_for(spec.node("analysis_2").unwrap()).unwrap();
    assert_eq!(a1.name, a2.name);
    assert_eq!(a1.device, Device::Cpu);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn yaml_round_trip(RandomSpec { spec, .. } in arb_spec()) {
        let text = to_yaml(&spec);
        let back = parse_config(&text).unwrap();
        prop_assert_eq!(back.tasks, spec.tasks);
        prop_assert_eq!(back.workflow, spec.workflow);
        prop_assert_eq!(back.options, spec.options);
    }
}

fn write(text: &str) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.yaml");
    std::fs::write(&path, text).unwrap();
    (dir, path)
}

#[test]
fn error_classes() {
    let (_d, p) = write("a: [unclosed\n");
    assert!(matches!(parse_config_file(&p), Err(ConfigError::Syntax(_))));

    let (_d, p) = write("Chat (chatbot):\n  num_requests: 1\n  device: gpu\n  colour: red\n");
    assert!(matches!(parse_config_file(&p), Err(ConfigError::Schema { .. })));

    let (_d, p) = write("Chat (chatbot):\n  num_requests: 1\n  device: gpu\n---\nx:\n  uses: Missing\n");
    match parse_config_file(&p) {
        Err(ConfigError::Reference(v)) => assert!(v.iter().all(|v| v.kind.is_reference())),
        other => panic!("{other:?}"),
    }

    assert!(matches!(parse_config_file("/nonexistent/bench.yaml"), Err(ConfigError::Io { .. })));
}

#[test]
fn semantic_violations_are_collected() {
    let text = "Chat (chatbot):\n  num_requests: 1\n  device: gpu\n  slo: 1s\n  mps: 150\n---\nx:\n  uses: Chat\n";
    let spec = parse_config(text).unwrap();
    let kinds: Vec<ViolationKind> = validate_spec(&spec).into_iter().map(|v| v.kind).collect();
    assert!(kinds.contains(&ViolationKind::SloMismatch), "{kinds:?}");
    assert!(kinds.contains(&ViolationKind::InvalidValue), "{kinds:?}");
}
