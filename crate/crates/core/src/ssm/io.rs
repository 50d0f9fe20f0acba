//! Binary dataset container.
//!
//! ```text
//! KNETDS\n
//! version 1\n
//! m <state dim>\n
//! n <observation dim>\n
//! T <trajectory length>\n
//! N <trajectory count>\n
//! labeled <0|1>\n
//! seed <u64>\n
//! model <single-line JSON model descriptor>\n
//! end\n
//! payload: for each trajectory, x0 (m values), then states (T·m values,
//! row-major, only if labeled), then observations (T·n values, row-major);
//! every value is a little-endian IEEE-754 f64.
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{Dataset, ModelDescriptor, StateSpaceModel, Trajectory};
use crate::{Error, Result};

pub const MAGIC: &str = "KNETDS";
pub const FORMAT_VERSION: u32 = 1;

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_dataset(ds, &mut out).map_err(|e| with_path(e, path))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(&mut BufReader::new(file)).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

pub fn write_dataset<W: Write>(ds: &Dataset, out: &mut W) -> Result<()> {
    ds.validate()?;
    let len = ds
        .horizon()
        .ok_or_else(|| Error::Inconsistent("trajectories must share one length to be saved".into()))?;
    let descriptor = serde_json::to_string(&ds.model.descriptor()).map_err(|e| Error::Malformed(e.to_string()))?;
    let header = format!(
        "{MAGIC}\nversion {FORMAT_VERSION}\nm {}\nn {}\nT {len}\nN {}\nlabeled {}\nseed {}\nmodel {descriptor}\nend\n",
        ds.model.state_dim(),
        ds.model.obs_dim(),
        ds.len(),
        u8::from(ds.labeled),
        ds.seed,
    );
    let io = |e| Error::io("<writer>", e);
    out.write_all(header.as_bytes()).map_err(io)?;
    let mut buf = Vec::new();
    for traj in &ds.trajectories {
        buf.clear();
        buf.extend(traj.x0.iter().flat_map(|v| v.to_le_bytes()));
        if let Some(states) = &traj.states {
            push_row_major(&mut buf, states);
        }
        push_row_major(&mut buf, &traj.observations);
        out.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

fn push_row_major(buf: &mut Vec<u8>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            buf.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
}

struct Header {
    m: usize,
    n: usize,
    len: usize,
    count: usize,
    labeled: bool,
    seed: u64,
    model: StateSpaceModel,
}

fn header_line<R: BufRead>(input: &mut R, key: &str) -> Result<String> {
    let mut line = String::new();
    let read = input.read_line(&mut line).map_err(|e| Error::io("<reader>", e))?;
    if read == 0 || !line.ends_with('\n') {
        return Err(Error::Malformed(format!("header ended before `{key}`")));
    }
    let line = line.trim_end_matches('\n');
    if key == MAGIC || key == "end" {
        return if line == key {
            Ok(String::new())
        } else {
            Err(Error::Malformed(format!("expected `{key}`, found `{line}`")))
        };
    }
    match line.split_once(' ') {
        Some((k, v)) if k == key => Ok(v.to_string()),
        _ => Err(Error::Malformed(format!("expected `{key} <value>`, found `{line}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Malformed(format!("bad value for `{key}`: `{value}`")))
}

fn read_header<R: BufRead>(input: &mut R) -> Result<Header> {
    header_line(input, MAGIC)?;
    let version: u32 = parse_num("version", &header_line(input, "version")?)?;
    if version != FORMAT_VERSION {
        return Err(Error::Malformed(format!("unsupported format version {version}")));
    }
    let m = parse_num("m", &header_line(input, "m")?)?;
    let n = parse_num("n", &header_line(input, "n")?)?;
    let len = parse_num("T", &header_line(input, "T")?)?;
    let count = parse_num("N", &header_line(input, "N")?)?;
    let labeled = match header_line(input, "labeled")?.as_str() {
        "0" => false,
        "1" => true,
        other => return Err(Error::Malformed(format!("bad labeled flag `{other}`"))),
    };
    let seed = parse_num("seed", &header_line(input, "seed")?)?;
    let descriptor: ModelDescriptor = serde_json::from_str(&header_line(input, "model")?)
        .map_err(|e| Error::Malformed(format!("model descriptor: {e}")))?;
    header_line(input, "end")?;
    let model = StateSpaceModel::from_descriptor(&descriptor)?;
    if model.state_dim() != m || model.obs_dim() != n {
        return Err(Error::Inconsistent(format!(
            "header says m={m}, n={n} but model descriptor has m={}, n={}",
            model.state_dim(),
            model.obs_dim()
        )));
    }
    if len == 0 {
        return Err(Error::Inconsistent("trajectory length must be positive".into()));
    }
    Ok(Header {
        m,
        n,
        len,
        count,
        labeled,
        seed,
        model,
    })
}

fn read_values<R: Read>(input: &mut R, count: usize, what: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    input.read_exact(&mut bytes).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Malformed(format!("payload truncated while reading {what}")),
        _ => Error::io("<reader>", e),
    })?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn read_dataset<R: BufRead>(input: &mut R) -> Result<Dataset> {
    let h = read_header(input)?;
    let mut trajectories = Vec::with_capacity(h.count.min(1 << 20));
    for i in 0..h.count {
        let x0 = DVector::from_vec(read_values(input, h.m, &format!("x0 of trajectory {i}"))?);
        let states = if h.labeled {
            let v = read_values(input, h.len * h.m, &format!("states of trajectory {i}"))?;
            Some(DMatrix::from_row_slice(h.len, h.m, &v))
        } else {
            None
        };
        let v = read_values(input, h.len * h.n, &format!("observations of trajectory {i}"))?;
        let obs = DMatrix::from_row_slice(h.len, h.n, &v);
        trajectories.push(Trajectory::new(x0, states, obs)?);
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(|e| Error::io("<reader>", e))? != 0 {
        return Err(Error::Malformed("trailing bytes after payload".into()));
    }
    Dataset::new(trajectories, h.labeled, h.seed, h.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{generate_dataset, LinearModel, LorenzModel, NoiseSpec};

    fn sample(labeled: bool) -> Dataset {
        let model = StateSpaceModel::Linear(LinearModel::canonical(2, 2, NoiseSpec::new(0.5, 2.0).unwrap()).unwrap());
        generate_dataset(&model, 3, 7, &model.default_x0(), labeled, 17).unwrap()
    }

    fn bytes(ds: &Dataset) -> Vec<u8> {
        let mut out = Vec::new();
        write_dataset(ds, &mut out).unwrap();
        out
    }

    #[test]
    fn round_trip_keeps_labels() {
        let ds = sample(true);
        let back = read_dataset(&mut bytes(&ds).as_slice()).unwrap();
        assert_eq!(back, ds);
        assert!(back.trajectories.iter().all(|t| t.states.is_some()));
    }

    #[test]
    fn lorenz_round_trip() {
        let model = StateSpaceModel::Lorenz(LorenzModel::new(1.0, 1.0).unwrap());
        let ds = generate_dataset(&model, 2, 5, &model.default_x0(), false, 3).unwrap();
        assert_eq!(read_dataset(&mut bytes(&ds).as_slice()).unwrap(), ds);
    }

    #[test]
    fn truncated_payload_is_malformed() {
        let raw = bytes(&sample(true));
        let cut = &raw[..raw.len() - 5];
        assert!(matches!(read_dataset(&mut &cut[..]), Err(Error::Malformed(_))));
    }

    #[test]
    fn truncated_header_is_malformed() {
        let raw = bytes(&sample(false));
        let cut = &raw[..20];
        assert!(matches!(read_dataset(&mut &cut[..]), Err(Error::Malformed(_))));
    }

    #[test]
    fn dimension_disagreement_is_inconsistent() {
        let raw = bytes(&sample(false));
        let text = String::from_utf8_lossy(&raw).replacen("\nm 2\n", "\nm 3\n", 1);
        let edited: Vec<u8> = text.bytes().collect();
        // the lossy conversion would corrupt the payload; only the header matters here
        let header_end = edited.windows(4).position(|w| w == b"end\n").unwrap() + 4;
        assert!(matches!(read_dataset(&mut &edited[..header_end]), Err(Error::Inconsistent(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_dataset("/definitely/not/here.knds").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.knds");
        let ds = sample(true);
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }
}
