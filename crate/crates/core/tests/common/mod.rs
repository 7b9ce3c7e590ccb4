#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use evidence_core::backends::{Backend, BackendEndpoint, Backends, HttpBackend, Role, Script};
use evidence_core::eval::{load_fixtures, CaseFixture, EvalEnv, Protocol};
use evidence_core::protocol::EngineContext;
use evidence_core::store::CorpusHandle;
use evidence_core::synth::{
    build_world, rcc_cases, worked_case_slides, SimConfig, SimulatedBackend, SlideSpec, World,
};

pub const WORLD_SEED: u64 = 11;

pub fn worked_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/worked")
}

pub fn worked_fixtures() -> Vec<CaseFixture> {
    load_fixtures(&worked_dir()).expect("worked fixtures load")
}

pub fn script(name: &str) -> Script {
    let path = worked_dir().join("scripts").join(format!("{name}.json"));
    Script::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Library plus the three worked-case slides, built once per test binary.
pub fn worked_world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| build_world(32, WORLD_SEED, &worked_case_slides()).unwrap())
}

pub fn worked_context(backends: Backends) -> EngineContext {
    let w = worked_world();
    EngineContext::new(backends)
        .with_corpus(Arc::new(w.corpus.clone()))
        .with_toolkits(w.toolkits.clone())
}

pub fn http_backends(base_url: &str) -> Backends {
    let client = |role| -> Arc<dyn Backend> {
        let mut e = BackendEndpoint::new(role, base_url);
        e.timeout = BackendEndpoint::TEST_TIMEOUT * 5;
        e.retry_budget = 0;
        Arc::new(HttpBackend::new(e).unwrap())
    };
    Backends {
        interpreter: client(Role::Interpreter),
        reasoner: client(Role::Reasoner),
        exam_oracle: Some(client(Role::ExamOracle)),
    }
}

/// `n` synthetic renal cases served by the simulated backend.
pub fn synthetic_env(n: usize, seed: u64) -> (EvalEnv, Vec<CaseFixture>) {
    let cases = rcc_cases(n, seed);
    let slides: Vec<SlideSpec> = cases.iter().map(|c| c.slide.clone()).collect();
    let world = build_world(32, seed, &slides).unwrap();
    let corpus: Arc<CorpusHandle> = Arc::new(world.corpus);
    let sim = SimulatedBackend::new(
        corpus.clone(),
        world.bank,
        cases.iter().map(|c| (c.case_info.clone(), c.truth.clone())),
        SimConfig {
            seed,
            ..SimConfig::default()
        },
    );
    let ctx = EngineContext::new(Backends::shared(Arc::new(sim)))
        .with_corpus(corpus)
        .with_toolkits(world.toolkits);
    let fixtures = cases.iter().map(|c| c.fixture(Protocol::Es)).collect();
    (EvalEnv::new(ctx), fixtures)
}
