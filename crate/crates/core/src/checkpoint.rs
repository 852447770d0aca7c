//! Plain-text mixture checkpoints.
//!
//! ```text
//! # gmm checkpoint
//! state_dim = 2
//! action_dim = 1
//! k = 2
//! floor = 1e-8
//! eta = 3.1e-1 0e0
//! component = <lower triangle of S_1, row by row>
//! component = <lower triangle of S_2, row by row>
//! ```
//!
//! Numbers use Rust's shortest round-trip formatting, so a write/read cycle is
//! bit-exact.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gmm_model::GmmParams;
use crate::sym_linalg::SpdMatrix;

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values
        .into_iter()
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn to_string(g: &GmmParams) -> String {
    let floor = g.components()[0].floor();
    let mut out = String::from("# gmm checkpoint\n");
    out.push_str(&format!("state_dim = {}\n", g.state_dim()));
    out.push_str(&format!("action_dim = {}\n", g.action_dim()));
    out.push_str(&format!("k = {}\n", g.k()));
    out.push_str(&format!("floor = {floor:e}\n"));
    out.push_str(&format!("eta = {}\n", join(g.eta().iter().copied())));
    for c in g.components() {
        let m = c.as_matrix();
        let n = m.nrows();
        let lower = (0..n).flat_map(|i| (0..=i).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]);
        out.push_str(&format!("component = {}\n", join(lower)));
    }
    out
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        line,
        msg: msg.into(),
    }
}

fn parse_floats(line: usize, text: &str) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| parse_err(line, format!("not a number: {t:?}")))
        })
        .collect()
}

fn parse_count(line: usize, text: &str) -> Result<usize> {
    text.parse()
        .map_err(|_| parse_err(line, format!("not a non-negative integer: {text:?}")))
}

pub fn from_str(text: &str) -> Result<GmmParams> {
    let (mut ds, mut da, mut k, mut floor, mut eta) = (None, None, None, None, None);
    let mut components = Vec::new();
    let mut last_line = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| parse_err(line, "expected `key = value`"))?;
        let value = value.trim();
        match key.trim() {
            "state_dim" => ds = Some(parse_count(line, value)?),
            "action_dim" => da = Some(parse_count(line, value)?),
            "k" => k = Some(parse_count(line, value)?),
            "floor" => {
                let f = value
                    .parse::<f64>()
                    .map_err(|_| parse_err(line, format!("not a number: {value:?}")))?;
                floor = Some(f);
            }
            "eta" => eta = Some(parse_floats(line, value)?),
            "component" => {
                let (ds, da, floor) = match (ds, da, floor) {
                    (Some(a), Some(b), Some(f)) => (a, b, f),
                    _ => return Err(parse_err(line, "component before state_dim, action_dim and floor")),
                };
                let n = ds + da + 1;
                let vals = parse_floats(line, value)?;
                if vals.len() != n * (n + 1) / 2 {
                    return Err(parse_err(
                        line,
                        format!("expected {} entries, got {}", n * (n + 1) / 2, vals.len()),
                    ));
                }
                let mut m = DMatrix::zeros(n, n);
                let mut it = vals.into_iter();
                for i in 0..n {
                    for j in 0..=i {
                        let v = it.next().expect("length checked");
                        m[(i, j)] = v;
                        m[(j, i)] = v;
                    }
                }
                let s = SpdMatrix::from_matrix(m, floor).map_err(|e| parse_err(line, e.to_string()))?;
                components.push(s);
            }
            other => return Err(parse_err(line, format!("unknown key {other:?}"))),
        }
    }
    let missing = |name: &str| parse_err(last_line, format!("missing {name}"));
    let ds = ds.ok_or_else(|| missing("state_dim"))?;
    let da = da.ok_or_else(|| missing("action_dim"))?;
    let k = k.ok_or_else(|| missing("k"))?;
    let eta = eta.ok_or_else(|| missing("eta"))?;
    if components.len() != k {
        return Err(parse_err(
            last_line,
            format!("expected {k} components, got {}", components.len()),
        ));
    }
    GmmParams::new(ds, da, eta, components).map_err(|e| parse_err(last_line, e.to_string()))
}

pub fn write(path: &Path, g: &GmmParams) -> Result<()> {
    fs::write(path, to_string(g))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<GmmParams> {
    from_str(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::random_gmm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ds, da, k) in [(0, 1, 1), (2, 1, 3), (3, 2, 2)] {
            let g = random_gmm(&mut rng, ds, da, k);
            assert_eq!(from_str(&to_string(&g)).unwrap(), g);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.gmm");
        let g = random_gmm(&mut ChaCha8Rng::seed_from_u64(2), 1, 1, 2);
        write(&path, &g).unwrap();
        assert_eq!(read(&path).unwrap(), g);
    }

    #[test]
    fn malformed_input_names_the_line() {
        let g = random_gmm(&mut ChaCha8Rng::seed_from_u64(3), 1, 1, 2);
        let text = to_string(&g).replace("k = 2", "k = two");
        match from_str(&text) {
            Err(Error::Checkpoint { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        let truncated: String = to_string(&g).lines().take(6).map(|l| format!("{l}\n")).collect();
        assert!(matches!(from_str(&truncated), Err(Error::Checkpoint { .. })));
        assert!(from_str("state_dim = 1\nbogus = 3\n").is_err());
    }
}
