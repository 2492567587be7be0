//! Randomized probing of every endpoint by an uncleared principal.

use std::collections::{BTreeMap, BTreeSet};

use aho_corasick::AhoCorasick;
use ark_core::dataflow::RunRecord;
use ark_core::Digest;
use axum::http::Method;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::*;

pub struct FuzzReport {
    pub probes: usize,
    pub leaks: Vec<String>,
    pub statuses: BTreeMap<u16, usize>,
}

/// Every object a run produced, plus the chunks of raster outputs.
fn run_objects(env: &Env, run_id: &str) -> BTreeSet<Digest> {
    let store = env.svc.store();
    let (record_digest, record) = RunRecord::load(store, run_id).unwrap().unwrap();
    let mut out = BTreeSet::from([record_digest]);
    for t in &record.tasks {
        out.extend(t.outputs.iter().copied());
    }
    for n in &record.nodes {
        out.insert(n.object);
        if let Ok(l) = store.get_layer(&n.object) {
            out.extend(l.chunks.values().map(|c| c.0));
        }
    }
    out
}

fn layer_objects(manifest: Digest, layer: &ark_core::LayerVersion) -> BTreeSet<Digest> {
    let mut out: BTreeSet<Digest> = layer.chunks.values().map(|c| c.0).collect();
    out.insert(manifest);
    out
}

const EXPRS: [&str; 6] = ["A.b1 + 1", "A.b1 * 2", "A.b1 > 50", "abs(A.b1 - 7)", "A.b1 + B.b1", "max(A.b1, B.b1)"];

fn random_doc(rng: &mut ChaCha8Rng, layers: &[&str]) -> Value {
    let a = *layers.choose(rng).unwrap();
    let b = *layers.choose(rng).unwrap();
    let expr = *EXPRS.choose(rng).unwrap();
    let mut inputs = json!({ "A": { "layer": a } });
    let mut node_inputs = vec!["A"];
    if expr.contains("B.") {
        inputs["B"] = json!({ "layer": b });
        node_inputs.push("B");
    }
    let mut node = json!({ "id": "n", "op": "expr", "inputs": node_inputs, "params": { "expr": expr } });
    if rng.gen_bool(0.2) {
        node["declassify"] = json!([SECRET]);
    }
    let mut nodes = vec![node];
    let mut outputs = vec!["n"];
    if rng.gen_bool(0.3) {
        inputs["P"] = json!({ "layer": "parks" });
        nodes.push(json!({ "id": "z", "op": "zonal_stats", "inputs": ["n", "P"], "params": {} }));
        outputs.push("z");
    }
    json!({ "name": format!("probe-{}", rng.gen_range(0..4)), "inputs": inputs, "nodes": nodes, "outputs": outputs })
}

fn random_hex(rng: &mut ChaCha8Rng) -> String {
    Digest::of(&rng.gen::<[u8; 8]>()).to_hex()
}

/// Issues `probes` random requests as the public principal (and occasionally
/// with no or bogus credentials) and reports any response that carries a
/// secret tag name, a secret object's digest or a secret object's bytes.
pub async fn non_interference(env: &Env, probes: usize, seed: u64) -> FuzzReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let secret_run = env.run(&with_parks(chain_json("nests")), ANALYST).await;
    let public_run = env.run(&with_parks(chain_json("forest")), PUBLIC).await;
    let sub = {
        let body = json!({ "layer": "nests", "aoi": { "min_x": 0.0, "min_y": 19.5, "max_x": 0.5, "max_y": 20.0 }, "predicate": "A.b1 != B.b1", "webhook_url": "http://127.0.0.1:9/" });
        let (_, b) = env.call(Method::POST, "/subscriptions", Some(ANALYST), Some(&body)).await;
        serde_json::from_slice::<Value>(&b).unwrap()["id"].as_str().unwrap().to_string()
    };

    let mut secret = run_objects(env, &secret_run);
    secret.extend(layer_objects(env.nests.0, &env.nests.1));
    secret.extend(layer_objects(env.census.0, &env.census.1));
    let mut public: BTreeSet<Digest> = run_objects(env, &public_run);
    public.extend(layer_objects(env.forest.0, &env.forest.1));
    public.insert(env.parks);
    assert!(secret.is_disjoint(&public), "fixture objects must not be shared");

    let mut patterns: Vec<String> = secret.iter().map(Digest::to_hex).collect();
    patterns.push(SECRET.to_string());
    patterns.push(EMBARGO.to_string());
    let matcher = AhoCorasick::new(&patterns).unwrap();

    let secret_list: Vec<Digest> = secret.iter().copied().collect();
    let public_list: Vec<Digest> = public.iter().copied().collect();
    let names = ["forest", "nests", "census", "parks", "chain-n2", "absent"];
    let runs = [secret_run.clone(), public_run.clone(), uuid::Uuid::new_v4().to_string()];
    let mut accepted = Vec::new();
    let mut report = FuzzReport { probes: 0, leaks: Vec::new(), statuses: BTreeMap::new() };

    for i in 0..probes {
        let token = match rng.gen_range(0..100) {
            0..=2 => None,
            3..=5 => Some("tok-forged"),
            _ => Some(PUBLIC),
        };
        let digest = |rng: &mut ChaCha8Rng| match rng.gen_range(0..10) {
            0..=5 => secret_list.choose(rng).unwrap().to_hex(),
            6..=8 => public_list.choose(rng).unwrap().to_hex(),
            _ => random_hex(rng),
        };
        let (method, uri, body) = match rng.gen_range(0..9) {
            0 => (Method::GET, "/layers".to_string(), None),
            1 => (Method::GET, format!("/layers/{}/versions", names.choose(&mut rng).unwrap()), None),
            2 => {
                let m = digest(&mut rng);
                let name = names.choose(&mut rng).unwrap();
                let (b, x, y) = (rng.gen_range(0..3), rng.gen_range(0..2), rng.gen_range(0..2));
                (Method::GET, format!("/tiles/{name}/{m}/{b}/{x}/{y}"), None)
            }
            3 => (Method::POST, "/runs".to_string(), Some(random_doc(&mut rng, &names))),
            4 => (Method::GET, format!("/runs/{}", runs.choose(&mut rng).unwrap()), None),
            5 => (Method::GET, format!("/results/{}", runs.choose(&mut rng).unwrap()), None),
            6 => {
                let predicate = *["A.b1 != B.b1", "B.b1 > 100", "A.b1 +"].choose(&mut rng).unwrap();
                let body = json!({
                    "layer": names.choose(&mut rng).unwrap(),
                    "aoi": { "min_x": 0.0, "min_y": 19.5, "max_x": rng.gen_range(0.1..0.6), "max_y": 20.0 },
                    "predicate": predicate,
                    "webhook_url": "http://127.0.0.1:9/",
                });
                (Method::POST, "/subscriptions".to_string(), Some(body))
            }
            7 => {
                let id = if rng.gen_bool(0.5) { sub.clone() } else { uuid::Uuid::new_v4().to_string() };
                (Method::DELETE, format!("/subscriptions/{id}"), None)
            }
            _ => (Method::GET, format!("/provenance/{}", digest(&mut rng)), None),
        };
        let (status, bytes) = env.call(method.clone(), &uri, token, body.as_ref()).await;
        report.probes += 1;
        *report.statuses.entry(status.as_u16()).or_default() += 1;
        if status.as_u16() == 202 {
            let v: Value = serde_json::from_slice(&bytes).unwrap();
            accepted.push(v["run_id"].as_str().unwrap().to_string());
        }
        let mut why = Vec::new();
        if let Some(m) = matcher.find(&bytes) {
            why.push(format!("contains {}", patterns[m.pattern().as_usize()]));
        }
        if secret.contains(&Digest::of(&bytes)) {
            why.push("body is a secret object".to_string());
        }
        if !why.is_empty() {
            report.leaks.push(format!("probe {i}: {method} {uri} -> {status}: {}", why.join(", ")));
        }
    }
    for id in accepted {
        env.svc.wait_run(&id).await;
    }
    assert!(env.svc.subscriptions().iter().any(|s| s.id == sub), "probes removed another principal's subscription");
    report
}

pub fn chain_json(layer: &str) -> Value {
    json!({
        "name": "chain",
        "inputs": { "A": { "layer": layer } },
        "nodes": [
            { "id": "n1", "op": "expr", "inputs": ["A"], "params": { "expr": "A.b1 * 2 + 1" } },
            { "id": "n2", "op": "expr", "inputs": ["n1", "A"], "params": { "expr": "n1.b1 + A.b1" } },
            { "id": "z", "op": "zonal_stats", "inputs": ["n2", "P"], "params": {} }
        ],
        "outputs": ["n2", "z"]
    })
}

pub fn with_parks(mut doc: Value) -> Value {
    doc["inputs"]["P"] = json!({ "layer": "parks" });
    doc
}
