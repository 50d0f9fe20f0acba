//! Text checkpoint container.
//!
//! ```text
//! knet-checkpoint 1
//! dims <m> <n> <d_in> <d_h> <d_g>
//! block <name> <rows> <cols>
//! <row-major values, 17 significant digits, space separated>
//! ...
//! optimizer none
//!   | optimizer adam <lr> <beta1> <beta2> <eps> <step>
//!     first <name> <rows> <cols> / <values>   (one per block)
//!     second <name> <rows> <cols> / <values>  (one per block)
//! end
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::optim::OptimizerState;
use super::params::{Block, Dims, GainNetworkParams};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

fn render_block(out: &mut String, tag: &str, b: &Block) {
    let _ = writeln!(out, "{tag} {} {} {}", b.name, b.rows, b.cols);
    let values: Vec<String> = b.data.iter().map(|v| format!("{v:.16e}")).collect();
    let _ = writeln!(out, "{}", values.join(" "));
}

pub fn render_checkpoint(params: &GainNetworkParams, opt: Option<&OptimizerState>) -> String {
    let d = params.dims;
    let mut out = format!(
        "knet-checkpoint {CHECKPOINT_VERSION}\ndims {} {} {} {} {}\n",
        d.m, d.n, d.d_in, d.d_h, d.d_g
    );
    for b in params.blocks() {
        render_block(&mut out, "block", b);
    }
    match opt {
        None => out.push_str("optimizer none\n"),
        Some(o) => {
            let _ = writeln!(
                out,
                "optimizer adam {:.16e} {:.16e} {:.16e} {:.16e} {}",
                o.learning_rate, o.beta1, o.beta2, o.eps, o.step
            );
            for b in &o.first {
                render_block(&mut out, "first", b);
            }
            for b in &o.second {
                render_block(&mut out, "second", b);
            }
        }
    }
    out.push_str("end\n");
    out
}

struct Lines<'a> {
    inner: std::str::Lines<'a>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        self.line += 1;
        self.inner
            .next()
            .ok_or_else(|| Error::Malformed(format!("checkpoint ended early at line {}", self.line)))
    }

    fn fail(&self, what: &str) -> Error {
        Error::Malformed(format!("checkpoint line {}: {what}", self.line))
    }
}

fn num<T: std::str::FromStr>(lines: &Lines<'_>, s: Option<&str>) -> Result<T> {
    s.and_then(|v| v.parse().ok()).ok_or_else(|| lines.fail("expected a number"))
}

fn parse_block(lines: &mut Lines<'_>, tag: &str) -> Result<Block> {
    let head = lines.next()?;
    let mut parts = head.split_whitespace();
    if parts.next() != Some(tag) {
        return Err(lines.fail(&format!("expected `{tag}`")));
    }
    let name = parts.next().ok_or_else(|| lines.fail("missing block name"))?.to_string();
    let rows: usize = num(lines, parts.next())?;
    let cols: usize = num(lines, parts.next())?;
    let data_line = lines.next()?;
    let data = data_line
        .split_whitespace()
        .map(|v| v.parse::<f64>().map_err(|_| lines.fail("bad value")))
        .collect::<Result<Vec<_>>>()?;
    if data.len() != rows * cols {
        return Err(lines.fail(&format!("block {name} has {} values, expected {}", data.len(), rows * cols)));
    }
    Ok(Block { name, rows, cols, data })
}

pub fn parse_checkpoint(text: &str) -> Result<(GainNetworkParams, Option<OptimizerState>)> {
    let mut lines = Lines {
        inner: text.lines(),
        line: 0,
    };
    let magic = lines.next()?;
    if magic != format!("knet-checkpoint {CHECKPOINT_VERSION}") {
        return Err(lines.fail("not a version 1 checkpoint"));
    }
    let dims_line = lines.next()?;
    let mut parts = dims_line.split_whitespace();
    if parts.next() != Some("dims") {
        return Err(lines.fail("expected `dims`"));
    }
    let dims = Dims {
        m: num(&lines, parts.next())?,
        n: num(&lines, parts.next())?,
        d_in: num(&lines, parts.next())?,
        d_h: num(&lines, parts.next())?,
        d_g: num(&lines, parts.next())?,
    };
    let count = GainNetworkParams::zeros(dims).blocks().len();
    let blocks = (0..count).map(|_| parse_block(&mut lines, "block")).collect::<Result<Vec<_>>>()?;
    let params = GainNetworkParams::from_blocks(dims, blocks)?;

    let opt_line = lines.next()?;
    let mut parts = opt_line.split_whitespace();
    if parts.next() != Some("optimizer") {
        return Err(lines.fail("expected `optimizer`"));
    }
    let opt = match parts.next() {
        Some("none") => None,
        Some("adam") => {
            let mut o = OptimizerState::new(params.blocks(), num(&lines, parts.next())?);
            o.beta1 = num(&lines, parts.next())?;
            o.beta2 = num(&lines, parts.next())?;
            o.eps = num(&lines, parts.next())?;
            o.step = num(&lines, parts.next())?;
            for k in 0..count {
                o.first[k] = parse_block(&mut lines, "first")?;
            }
            for k in 0..count {
                o.second[k] = parse_block(&mut lines, "second")?;
            }
            for (p, (a, b)) in params.blocks().iter().zip(o.first.iter().zip(&o.second)) {
                if a.len() != p.len() || b.len() != p.len() {
                    return Err(Error::Inconsistent(format!("optimizer moments for {} have the wrong size", p.name)));
                }
            }
            Some(o)
        }
        _ => return Err(lines.fail("unknown optimizer")),
    };
    if lines.next()? != "end" {
        return Err(lines.fail("expected `end`"));
    }
    Ok((params, opt))
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &GainNetworkParams, opt: Option<&OptimizerState>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_checkpoint(params, opt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(GainNetworkParams, Option<OptimizerState>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}
