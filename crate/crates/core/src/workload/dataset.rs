//! Persisted datasets: `catalog.json`, `{train,valid,test}.jsonl` and a
//! `manifest.json` recording the split assignment and generator config.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gen_candidate_set, gen_plan_with, oracle_latency, GenConfig};
use crate::error::{Error, Result};
use crate::numerics::derive_seed;
use crate::plan::{parse_plan_json, Catalog, PlanTree};

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.valid, self.test];
        if r.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || ((r.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("split ratios {r:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }

    /// Query counts per split; rounding leftovers go to the test split.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let train = ((n as f64) * self.train).round() as usize;
        let valid = (((n as f64) * self.valid).round() as usize).min(n - train.min(n));
        let train = train.min(n);
        [train, valid, n - train - valid]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitQueries {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config: GenConfig,
    pub n_queries: usize,
    pub candidates_per_query: usize,
    pub ratios: SplitRatios,
    pub catalog_fingerprint: String,
    pub splits: SplitQueries,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub catalog: Catalog,
    pub manifest: DatasetManifest,
    pub train: Vec<PlanTree>,
    pub valid: Vec<PlanTree>,
    pub test: Vec<PlanTree>,
}

fn query_plans(catalog: &Catalog, cfg: &GenConfig, q: usize, k: usize) -> Result<Vec<PlanTree>> {
    let seed = derive_seed(cfg.seed, &[1, q as u64]);
    let id = format!("q{q:05}");
    if k == 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plan = gen_plan_with(catalog, cfg, 0, &mut rng, &id, &format!("{id}-h0"))?;
        plan.latency_ms = Some(oracle_latency(&plan, catalog, derive_seed(seed, &[0]), cfg.noise_sigma)?);
        Ok(vec![plan])
    } else {
        Ok(gen_candidate_set(catalog, cfg, seed, &id, k)?.plans)
    }
}

/// Generates `n_queries` labeled queries with `candidates_per_query` plans
/// each and assigns whole queries to splits. Deterministic in `cfg.seed`
/// regardless of thread count.
pub fn gen_dataset(
    catalog: &Catalog,
    cfg: &GenConfig,
    n_queries: usize,
    candidates_per_query: usize,
    ratios: SplitRatios,
) -> Result<Dataset> {
    cfg.validate()?;
    ratios.validate()?;
    if candidates_per_query == 0 {
        return Err(Error::InvalidInput("candidates_per_query must be at least 1".into()));
    }
    let per_query: Vec<Vec<PlanTree>> = (0..n_queries)
        .into_par_iter()
        .map(|q| query_plans(catalog, cfg, q, candidates_per_query))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..n_queries).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2])));
    let [n_train, n_valid, _] = ratios.counts(n_queries);
    let mut assignment = vec![0usize; n_queries];
    for (pos, &q) in order.iter().enumerate() {
        assignment[q] = if pos < n_train {
            0
        } else if pos < n_train + n_valid {
            1
        } else {
            2
        };
    }
    let mut parts: [Vec<PlanTree>; 3] = Default::default();
    let mut ids: [Vec<String>; 3] = Default::default();
    for (q, plans) in per_query.into_iter().enumerate() {
        let s = assignment[q];
        ids[s].push(plans[0].query_id.clone());
        parts[s].extend(plans);
    }
    let [train, valid, test] = parts;
    let [train_ids, valid_ids, test_ids] = ids;
    Ok(Dataset {
        catalog: catalog.clone(),
        manifest: DatasetManifest {
            seed: cfg.seed,
            config: cfg.clone(),
            n_queries,
            candidates_per_query,
            ratios,
            catalog_fingerprint: catalog.fingerprint(),
            splits: SplitQueries {
                train: train_ids,
                valid: valid_ids,
                test: test_ids,
            },
        },
        train,
        valid,
        test,
    })
}

fn jsonl(plans: &[PlanTree]) -> String {
    let mut s = String::new();
    for p in plans {
        s.push_str(&p.to_json_string());
        s.push('\n');
    }
    s
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&[PlanTree]> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Writes the dataset files into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("catalog.json"), self.catalog.to_json())?;
        for name in SPLITS {
            fs::write(dir.join(format!("{name}.jsonl")), jsonl(self.split(name).unwrap()))?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }
}

/// Reads every non-empty line of a JSON-lines plan file.
pub fn read_plans(path: &Path, catalog: &Catalog) -> Result<Vec<PlanTree>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_plan_json(l.as_bytes(), catalog)
                .map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Loads a dataset written by [`Dataset::write`], checking that the catalog
/// matches the manifest fingerprint.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let catalog = Catalog::from_json(&fs::read(dir.join("catalog.json"))?)?;
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.catalog_fingerprint != catalog.fingerprint() {
        return Err(Error::InvalidInput(format!(
            "catalog fingerprint {} does not match the manifest's {}",
            catalog.fingerprint(),
            manifest.catalog_fingerprint
        )));
    }
    let train = read_plans(&dir.join("train.jsonl"), &catalog)?;
    let valid = read_plans(&dir.join("valid.jsonl"), &catalog)?;
    let test = read_plans(&dir.join("test.jsonl"), &catalog)?;
    Ok(Dataset {
        catalog,
        manifest,
        train,
        valid,
        test,
    })
}
