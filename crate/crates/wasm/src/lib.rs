//! Browser bindings: a partition explorer and a round-by-round simulation
//! session. Everything crosses the boundary as TOML in and CSV or JSON out.

use fedsynth_core::experiment::{self, ExperimentConfig, Simulation};
use fedsynth_core::Error;
use wasm_bindgen::prelude::*;

/// Small enough to step interactively in a browser tab.
pub const DEMO_CONFIG: &str = r#"seed = 0
method = "clip2fl"

[dataset]
num_classes = 6
input_dim = 16
n_max = 200
imbalance_factor = 50.0
test_per_class = 50
group_thresholds = [60, 15]

[partition]
num_clients = 10
alpha = 0.5

[model]
hidden = [32]
feature_dim = 16

[training]
rounds = 20
epochs = 2

[server]
features_per_class = 20
feature_steps = 20
feature_lr = 20.0
eta_pcl = 0.0001
retrain_steps = 100
"#;

fn js_err(e: Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn parse(config_toml: &str, method: Option<&str>) -> Result<ExperimentConfig, Error> {
    let overrides: Vec<String> = method.map(|m| format!("method=\"{m}\"")).into_iter().collect();
    ExperimentConfig::from_toml_str(config_toml, &overrides)
}

#[wasm_bindgen(js_name = defaultConfig)]
pub fn default_config() -> String {
    DEMO_CONFIG.to_string()
}

/// Per-client per-class counts as CSV.
#[wasm_bindgen(js_name = partitionReport)]
pub fn partition_report(config_toml: &str) -> Result<String, JsValue> {
    let cfg = parse(config_toml, None).map_err(js_err)?;
    experiment::partition_report(&cfg).map_err(js_err)
}

#[wasm_bindgen]
pub struct Session {
    sim: Simulation,
    rounds: usize,
}

#[wasm_bindgen]
impl Session {
    /// `method` overrides the config's method when non-empty.
    #[wasm_bindgen(constructor)]
    pub fn new(config_toml: &str, method: &str) -> Result<Session, JsValue> {
        let method = (!method.is_empty()).then_some(method);
        let cfg = parse(config_toml, method).map_err(js_err)?;
        let rounds = cfg.training.rounds;
        let sim = Simulation::new(&cfg).map_err(js_err)?;
        Ok(Session { sim, rounds })
    }

    /// Runs one round and returns its metrics as a JSON object.
    pub fn step(&mut self) -> Result<String, JsValue> {
        let m = self.sim.step().map_err(js_err)?;
        m.to_json_line().map_err(js_err)
    }

    pub fn round(&self) -> usize {
        self.sim.state.round
    }

    pub fn done(&self) -> bool {
        self.sim.state.round >= self.rounds
    }

    pub fn method(&self) -> String {
        self.sim.config.method.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_config_parses_and_partitions() {
        let cfg = parse(DEMO_CONFIG, Some("fedavg")).unwrap();
        assert_eq!(cfg.partition.num_clients, 10);
        let csv = experiment::partition_report(&cfg).unwrap();
        assert_eq!(csv.lines().count(), 11);
    }

    #[test]
    fn session_steps_until_done() {
        let mut cfg = DEMO_CONFIG.replace("rounds = 20", "rounds = 2");
        cfg.push('\n');
        let mut s = Session::new(&cfg, "no_pcl").unwrap();
        assert_eq!(s.method(), "no_pcl");
        while !s.done() {
            let line = s.step().unwrap();
            assert!(line.starts_with('{') && line.contains("\"acc_all\""));
        }
        assert_eq!(s.round(), 2);
    }
}
