//! `model.bundle/` persistence.
//!
//! Layout:
//!
//! ```text
//! model.bundle/
//!   manifest.json           schema, V, seeds, τ_i, dropped columns, split ids
//!   pca_<family>.bin        "TVPCA001", u32 LE header length, JSON header, f64 LE tensors
//!   forest_<family>.json    trees
//! ```
//!
//! Writing the same model twice yields identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EnsembleConfig, EnsembleModel, FamilyModel, ForestModel, LearningError, OperatingPoint, PcaModel};
use crate::features::Family;

pub const BUNDLE_SCHEMA: &str = "thermoviab.model_bundle/1";
pub const MANIFEST: &str = "manifest.json";
const PCA_MAGIC: &[u8; 8] = b"TVPCA001";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyEntry {
    pub family: Family,
    pub threshold: f64,
    pub forest_seed: u64,
    pub n_features: usize,
    pub dropped_columns: Vec<usize>,
    pub k: usize,
    pub cumulative_explained: f64,
    pub columns_sha256: String,
    pub validation: Option<OperatingPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub schema: String,
    pub vote_threshold: usize,
    pub config: EnsembleConfig,
    pub families: Vec<FamilyEntry>,
    pub split: SplitIds,
}

#[derive(Serialize, Deserialize)]
struct PcaHeader {
    n_features: usize,
    kept: Vec<usize>,
    k: usize,
    total_variance: f64,
}

fn pca_bytes(p: &PcaModel) -> Vec<u8> {
    let header = serde_json::to_vec(&PcaHeader {
        n_features: p.n_features,
        kept: p.kept.clone(),
        k: p.k(),
        total_variance: p.total_variance,
    })
    .expect("header serializes");
    let mut out = PCA_MAGIC.to_vec();
    out.extend((header.len() as u32).to_le_bytes());
    out.extend(header);
    let tensors = p.mean.iter().chain(&p.scale).chain(p.components.iter().flatten()).chain(&p.eigenvalues).chain(&p.explained_ratio);
    for v in tensors {
        out.extend(v.to_le_bytes());
    }
    out
}

fn pca_from_bytes(b: &[u8]) -> Result<PcaModel, LearningError> {
    let bad = |m: &str| LearningError::Bundle(format!("pca tensor file: {m}"));
    if b.len() < 12 || &b[..8] != PCA_MAGIC {
        return Err(bad("bad magic"));
    }
    let hlen = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
    let header: PcaHeader = serde_json::from_slice(b.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?)?;
    let body = &b[12 + hlen..];
    let p = header.kept.len();
    let expected = 2 * p + header.k * p + 2 * header.k;
    if body.len() != expected * 8 {
        return Err(bad("tensor length"));
    }
    let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let (mean, rest) = vals.split_at(p);
    let (scale, rest) = rest.split_at(p);
    let (comp, rest) = rest.split_at(header.k * p);
    let (eig, ratio) = rest.split_at(header.k);
    Ok(PcaModel {
        n_features: header.n_features,
        kept: header.kept,
        mean: mean.to_vec(),
        scale: scale.to_vec(),
        components: comp.chunks(p.max(1)).map(<[f64]>::to_vec).collect(),
        eigenvalues: eig.to_vec(),
        explained_ratio: ratio.to_vec(),
        total_variance: header.total_variance,
    })
}

pub fn save_bundle(model: &EnsembleModel, config: &EnsembleConfig, split: &SplitIds, dir: &Path) -> Result<(), LearningError> {
    fs::create_dir_all(dir)?;
    let mut families = Vec::new();
    for m in &model.members {
        let name = m.family.name();
        fs::write(dir.join(format!("pca_{name}.bin")), pca_bytes(&m.pca))?;
        fs::write(dir.join(format!("forest_{name}.json")), serde_json::to_vec_pretty(&m.forest)?)?;
        families.push(FamilyEntry {
            family: m.family,
            threshold: m.forest.threshold,
            forest_seed: m.forest.config.seed,
            n_features: m.pca.n_features,
            dropped_columns: m.pca.dropped(),
            k: m.pca.k(),
            cumulative_explained: m.pca.cumulative_explained(),
            columns_sha256: m.columns_sha256.clone(),
            validation: m.validation,
        });
    }
    let manifest = BundleManifest {
        schema: BUNDLE_SCHEMA.into(),
        vote_threshold: model.vote_threshold,
        config: *config,
        families,
        split: split.clone(),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<(EnsembleModel, BundleManifest), LearningError> {
    let text = fs::read(dir.join(MANIFEST))
        .map_err(|e| LearningError::Bundle(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    let manifest: BundleManifest = serde_json::from_slice(&text)?;
    if manifest.schema != BUNDLE_SCHEMA {
        return Err(LearningError::Bundle(format!("unsupported schema {}", manifest.schema)));
    }
    let mut members = Vec::new();
    for e in &manifest.families {
        let name = e.family.name();
        let pca = pca_from_bytes(&fs::read(dir.join(format!("pca_{name}.bin")))?)?;
        let forest: ForestModel = serde_json::from_slice(&fs::read(dir.join(format!("forest_{name}.json")))?)?;
        if forest.threshold != e.threshold {
            return Err(LearningError::Bundle(format!("{name}: threshold disagrees with manifest")));
        }
        members.push(FamilyModel {
            family: e.family,
            pca,
            forest,
            columns_sha256: e.columns_sha256.clone(),
            validation: e.validation,
        });
    }
    for f in Family::ALL {
        if !members.iter().any(|m| m.family == f) {
            return Err(LearningError::MissingFamily(f));
        }
    }
    Ok((EnsembleModel::new(members, manifest.vote_threshold)?, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureRow, FeatureTable};
    use crate::learning::train_ensemble;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(n: usize) -> (FeatureTable, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let names: Vec<String> =
            Family::ALL.iter().flat_map(|f| (0..f.len()).map(move |i| format!("{}.x{i}", f.name()))).collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let rows = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| FeatureRow {
                case_id: format!("c{i}"),
                nodule_id: "n1".into(),
                values: (0..names.len()).map(|c| if c % 7 == 0 && l { 1.0 } else { 0.0 } + rng.random::<f64>()).collect(),
            })
            .collect();
        (FeatureTable { names, rows }, labels)
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let (t, y) = table(24);
        let cfg = EnsembleConfig { n_trees: 8, ..EnsembleConfig::default() };
        let train: Vec<usize> = (0..18).collect();
        let val: Vec<usize> = (18..24).collect();
        let model = train_ensemble(&t, &y, &train, &val, &cfg).unwrap();
        let split = SplitIds { train: vec!["c0".into()], validation: vec!["c18".into()], test: vec![] };
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        save_bundle(&model, &cfg, &split, &a).unwrap();
        let (loaded, manifest) = load_bundle(&a).unwrap();
        assert_eq!(manifest.split, split);
        save_bundle(&loaded, &manifest.config, &manifest.split, &b).unwrap();
        for entry in fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
        }
        for row in &t.rows {
            assert_eq!(model.predict(&t.names, &row.values).unwrap(), loaded.predict(&t.names, &row.values).unwrap());
        }
    }

    #[test]
    fn rejects_foreign_schema_and_corrupt_tensors() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST), br#"{"schema":"other/9","vote_threshold":2}"#).unwrap();
        assert!(load_bundle(dir.path()).is_err());
        assert!(pca_from_bytes(b"TVPCA001\x02\0\0\0{}").is_err());
        assert!(pca_from_bytes(b"nope").is_err());
    }
}
