//! JSON Lines datasets, feature-table sidecars and generation manifests.
//!
//! Dataset records are either `{"user", "z", "y"}` or
//! `{"user", "context", "a", "a_prime", "y"}`; a file may not mix the two.
//! Lines starting with `#` are provenance comments and are skipped.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::btl::{FeatureMap, FeatureTable, Population, PreferenceSample, Triple, UserDataset};
use crate::error::{Error, Result};
use crate::linalg::Vector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
enum Record {
    Raw {
        user: String,
        z: Vec<f64>,
        y: u8,
    },
    Tabular {
        user: String,
        context: String,
        a: String,
        a_prime: String,
        y: u8,
    },
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a JSONL dataset. `source` names the input in error messages.
/// Users come back in lexicographic order, samples in file order.
pub fn parse_dataset(text: &str, source: &str, feat: Option<&FeatureMap>) -> Result<Vec<UserDataset>> {
    let err = |line: usize, message: String| Error::Data {
        path: source.to_string(),
        line,
        message,
    };
    let mut users: BTreeMap<String, UserDataset> = BTreeMap::new();
    let mut dim: Option<usize> = None;
    let mut tabular: Option<bool> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record: Record =
            serde_json::from_str(trimmed).map_err(|e| err(line, format!("malformed record: {e}")))?;
        let is_tabular = matches!(record, Record::Tabular { .. });
        if *tabular.get_or_insert(is_tabular) != is_tabular {
            return Err(err(line, "raw and tabular records are mixed".into()));
        }
        let (user, z, triple, y) = match record {
            Record::Raw { user, z, y } => (user, Vector::from_vec(z), None, y),
            Record::Tabular {
                user,
                context,
                a,
                a_prime,
                y,
            } => {
                let f = feat.ok_or_else(|| err(line, "tabular record without a feature table".into()))?;
                let lookup = |r: Result<usize>| r.map_err(|e| err(line, e.to_string()));
                let t = Triple {
                    context: lookup(f.context_index(&context))?,
                    action: lookup(f.action_index(&a))?,
                    other: lookup(f.action_index(&a_prime))?,
                };
                if t.action == t.other {
                    return Err(err(line, format!("a and a_prime are both {a:?}")));
                }
                (user, f.difference(t), Some(t), y)
            }
        };
        let label = match y {
            0 => false,
            1 => true,
            other => return Err(err(line, format!("label must be 0 or 1, got {other}"))),
        };
        if z.is_empty() {
            return Err(err(line, "empty difference feature".into()));
        }
        if *dim.get_or_insert(z.len()) != z.len() {
            return Err(err(
                line,
                format!("dimension {} differs from earlier records ({})", z.len(), dim.unwrap_or(0)),
            ));
        }
        let sample = PreferenceSample::new(z, label).map_err(|e| err(line, e.to_string()))?;
        let entry = users.entry(user.clone()).or_insert_with(|| UserDataset {
            user,
            samples: Vec::new(),
            triples: triple.map(|_| Vec::new()),
        });
        entry.samples.push(sample);
        if let (Some(ts), Some(t)) = (entry.triples.as_mut(), triple) {
            ts.push(t);
        }
    }
    Ok(users.into_values().collect())
}

pub fn load_dataset(path: &Path, feat: Option<&FeatureMap>) -> Result<Vec<UserDataset>> {
    parse_dataset(&read_text(path)?, &path.display().to_string(), feat)
}

/// Serialises datasets as JSONL, one record per sample, after the given
/// `#` comment lines. Tabular records are written when triples are known
/// and a feature map is given.
pub fn format_dataset(datasets: &[UserDataset], feat: Option<&FeatureMap>, comments: &[String]) -> Result<String> {
    let mut out = String::new();
    for c in comments {
        out.push_str("# ");
        out.push_str(c);
        out.push('\n');
    }
    for d in datasets {
        for (i, s) in d.samples.iter().enumerate() {
            let y = u8::from(s.y);
            let record = match (feat, d.triples.as_ref()) {
                (Some(f), Some(ts)) => {
                    let t = ts[i];
                    Record::Tabular {
                        user: d.user.clone(),
                        context: f.contexts()[t.context].clone(),
                        a: f.actions()[t.action].clone(),
                        a_prime: f.actions()[t.other].clone(),
                        y,
                    }
                }
                _ => Record::Raw {
                    user: d.user.clone(),
                    z: s.z.iter().copied().collect(),
                    y,
                },
            };
            out.push_str(&serde_json::to_string(&record).map_err(|e| Error::contract(e.to_string()))?);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn load_features(path: &Path) -> Result<FeatureMap> {
    let text = read_text(path)?;
    let table: FeatureTable = serde_json::from_str(&text).map_err(|e| Error::Data {
        path: path.display().to_string(),
        line: e.line(),
        message: format!("malformed feature table: {e}"),
    })?;
    FeatureMap::from_table(&table)
}

pub fn format_features(feat: &FeatureMap) -> String {
    serde_json::to_string_pretty(&feat.to_table()).expect("feature table serialises") + "\n"
}

pub fn load_population(path: &Path) -> Result<Population> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Data {
        path: path.display().to_string(),
        line: e.line(),
        message: format!("malformed population file: {e}"),
    })
}

/// Provenance written next to generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub users: usize,
    pub per_user_budget: usize,
    pub records: usize,
    pub files: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::btl::{generate_offline_data, generate_population, PopulationConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn env(budget: usize) -> (FeatureMap, Vec<UserDataset>) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pop = generate_population(
            &PopulationConfig {
                users: 5,
                clusters: 2,
                dim: 3,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        let feat = FeatureMap::random(3, 4, 3, 0.0, &mut rng).unwrap();
        let data = generate_offline_data(&pop, Some(&feat), budget, 1.0, &mut rng).unwrap();
        (feat, data)
    }

    #[test]
    fn tabular_round_trip() {
        let (feat, data) = env(6);
        let text = format_dataset(&data, Some(&feat), &["seed=4".into()]).unwrap();
        assert!(text.starts_with("# seed=4\n"));
        assert_eq!(text.lines().count(), 1 + 5 * 6);
        let back = parse_dataset(&text, "mem", Some(&feat)).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn raw_round_trip_is_lossless() {
        let (_, mut data) = env(4);
        for d in &mut data {
            d.triples = None;
        }
        let text = format_dataset(&data, None, &[]).unwrap();
        assert_eq!(parse_dataset(&text, "mem", None).unwrap(), data);
    }

    #[test]
    fn empty_budget_gives_header_only() {
        let (feat, data) = env(0);
        let text = format_dataset(&data, Some(&feat), &["h".into()]).unwrap();
        assert_eq!(text, "# h\n");
        assert!(parse_dataset(&text, "mem", Some(&feat)).unwrap().is_empty());
    }

    fn line_of(e: Error) -> usize {
        match e {
            Error::Data { line, .. } => line,
            other => panic!("expected a data error, got {other}"),
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let ok = r#"{"user":"u","z":[0.5,0.5],"y":1}"#;
        let cases = [
            format!("{ok}\n{{\"user\":\"u\",\"z\":[0.5],\"y\":1}}"),
            format!("# c\n{ok}\n{{\"user\":\"u\",\"z\":[3.0,0.0],\"y\":0}}"),
            format!("{ok}\n\n{{\"user\":\"u\",\"z\":[0.1,0.1],\"y\":2}}"),
            format!("{ok}\nnot json"),
        ];
        let expected = [2, 3, 3, 2];
        for (text, line) in cases.iter().zip(expected) {
            assert_eq!(line_of(parse_dataset(text, "f.jsonl", None).unwrap_err()), line, "{text}");
        }
    }

    #[test]
    fn tabular_errors() {
        let (feat, _) = env(1);
        let unknown = r#"{"user":"u","context":"nope","a":"a0","a_prime":"a1","y":1}"#;
        let e = parse_dataset(unknown, "f", Some(&feat)).unwrap_err();
        assert!(e.to_string().contains("nope"));
        let same = r#"{"user":"u","context":"x00","a":"a01","a_prime":"a01","y":1}"#;
        assert_eq!(line_of(parse_dataset(same, "f", Some(&feat)).unwrap_err()), 1);
        let good = r#"{"user":"u","context":"x00","a":"a00","a_prime":"a01","y":1}"#;
        assert!(parse_dataset(good, "f", None).is_err());
        let mixed = format!("{good}\n{{\"user\":\"u\",\"z\":[0.1,0.1,0.1],\"y\":1}}");
        assert_eq!(line_of(parse_dataset(&mixed, "f", Some(&feat)).unwrap_err()), 2);
    }

    #[test]
    fn files_round_trip() {
        let (feat, data) = env(3);
        let dir = tempfile::tempdir().unwrap();
        let fpath = dir.path().join("sub/features.json");
        write_text(&fpath, &format_features(&feat)).unwrap();
        let feat2 = load_features(&fpath).unwrap();
        assert_eq!(feat2, feat);
        let dpath = dir.path().join("data.jsonl");
        write_text(&dpath, &format_dataset(&data, Some(&feat), &[]).unwrap()).unwrap();
        assert_eq!(load_dataset(&dpath, Some(&feat2)).unwrap(), data);
        let missing = load_dataset(&dir.path().join("none.jsonl"), None).unwrap_err();
        assert!(matches!(missing, Error::Io { .. }));
    }
}
