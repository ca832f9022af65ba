//! Fixtures shared by the benchmarks.

use dpin_core::harness::ExperimentConfig;
use dpin_core::sim::{feasible_actions, Transition, UniformPolicy};
use dpin_core::{Action, DpinModel, ParamSet, State};

/// A model, its initial weights, a logged batch and one state with a
/// feasible action, all built from a named preset.
pub struct Fixture {
    pub cfg: ExperimentConfig,
    pub model: DpinModel,
    pub params: ParamSet,
    pub transitions: Vec<Transition>,
    pub state: State,
    pub action: Action,
}

impl Fixture {
    pub fn new(preset: &str, requests: usize) -> Self {
        let mut cfg = ExperimentConfig::preset(preset).expect("known preset");
        cfg.sim.user_population = cfg.sim.user_population.min(50);
        let sim = cfg.simulator().expect("valid simulator");
        let model = cfg.build_model().expect("valid model");
        let params = model.init_params(1).expect("init");
        let log = sim.generate_offline_log(&mut UniformPolicy, requests).expect("log");
        // The state with the most history makes the heaviest forward pass.
        let richest = log
            .transitions
            .iter()
            .max_by_key(|t| t.state.histories.lengths().iter().sum::<usize>())
            .expect("non-empty log");
        let state = richest.state.as_ref().clone();
        let action = feasible_actions(&state, &sim.layout()).pop().expect("feasible action");
        Self {
            cfg,
            model,
            params,
            transitions: log.transitions,
            state,
            action,
        }
    }
}
