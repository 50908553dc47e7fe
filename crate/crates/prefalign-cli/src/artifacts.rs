use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use prefalign::policy::TabularPolicy;
use prefalign::prefmodel::{PreferenceDataset, RewardTable};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const REWARD: &str = "reward.json";
pub const BASE_REFERENCE: &str = "base_reference.json";
pub const REFERENCE: &str = "reference.json";
pub const DATASET: &str = "dataset.jsonl";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub details: Value,
}

pub fn manifest_name(subcommand: &str) -> String {
    format!("manifest_{subcommand}.json")
}

/// Output directory for one subcommand run. Files are written immediately and
/// their hashes collected for the manifest.
pub struct OutDir {
    root: PathBuf,
    outputs: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::validation(format!("{}: {e}", root.display())))?;
        Ok(OutDir { root: root.to_path_buf(), outputs: BTreeMap::new(), inputs: BTreeMap::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn read(&mut self, name: &str) -> Result<Vec<u8>, CliError> {
        let p = self.path(name);
        let bytes = fs::read(&p).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?;
        self.inputs.insert(name.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn read_manifest(&self, subcommand: &str) -> Result<Manifest, CliError> {
        let p = self.path(&manifest_name(subcommand));
        let text = fs::read_to_string(&p)
            .map_err(|e| CliError::validation(format!("{}: {e} (run `prefalign {subcommand}` first)", p.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))
    }

    pub fn finish(self, subcommand: &str, config_hash: &str, seed: u64, details: Value) -> Result<(), CliError> {
        let m = Manifest {
            subcommand: subcommand.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            inputs: self.inputs,
            outputs: self.outputs,
            details,
        };
        let mut bytes = serde_json::to_vec_pretty(&m).expect("manifest serializes");
        bytes.push(b'\n');
        let p = self.root.join(manifest_name(subcommand));
        fs::write(&p, bytes).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))
    }
}

/// The artifacts written by `generate`, read back and checked against its manifest.
pub struct Inputs {
    pub reward: RewardTable,
    pub reference: TabularPolicy,
    pub dataset: PreferenceDataset,
}

pub fn load_inputs(out: &mut OutDir, generation_hash: &str) -> Result<Inputs, CliError> {
    let generate = out.read_manifest("generate")?;
    if generate.details.get("generation_hash").and_then(Value::as_str) != Some(generation_hash) {
        return Err(CliError::validation(format!(
            "{} is stale: the generation settings in the config changed since it was written",
            manifest_name("generate")
        )));
    }
    let mut read_checked = |name: &str| -> Result<String, CliError> {
        let bytes = out.read(name)?;
        let expected = generate
            .outputs
            .get(name)
            .ok_or_else(|| CliError::validation(format!("{name} is not listed in the generate manifest")))?;
        if &sha256_hex(&bytes) != expected {
            return Err(CliError::validation(format!("{name} does not match its hash in the generate manifest")));
        }
        String::from_utf8(bytes).map_err(|e| CliError::validation(format!("{name}: {e}")))
    };
    let reward = RewardTable::from_json(&read_checked(REWARD)?).map_err(|e| CliError::from(e).context(REWARD))?;
    let reference =
        TabularPolicy::from_json(&read_checked(REFERENCE)?).map_err(|e| CliError::from(e).context(REFERENCE))?;
    let dataset =
        PreferenceDataset::from_jsonl(&read_checked(DATASET)?).map_err(|e| CliError::from(e).context(DATASET))?;
    Ok(Inputs { reward, reference, dataset })
}

/// Reads an extra policy file and records its hash as an input under `key`.
pub fn read_policy(out: &mut OutDir, path: &Path, key: &str) -> Result<TabularPolicy, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    out.inputs.insert(key.to_string(), sha256_hex(&bytes));
    let text = String::from_utf8(bytes).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    TabularPolicy::from_json(&text).map_err(|e| CliError::from(e).context(&path.display().to_string()))
}
