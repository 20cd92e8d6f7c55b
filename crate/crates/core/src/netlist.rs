//! Placement instances: macros with pins, hyperedge nets, and the N×N canvas.

use std::fmt::Write as _;

use log::warn;
use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Generator density cap: total macro area never exceeds this fraction of N².
pub const MAX_DENSITY: f64 = 0.5;
/// The parser accepts denser designs but warns above this fraction.
pub const WARN_DENSITY: f64 = 0.9;
const MAX_SYNTH_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum NetlistError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("net {net} references missing macro {macro_id}")]
    DanglingMacro { net: usize, macro_id: usize },
    #[error("net {net} references missing pin {pin} of macro {macro_id}")]
    DanglingPin {
        net: usize,
        macro_id: usize,
        pin: usize,
    },
    #[error("macro {macro_id} is {width}x{height}, which does not fit a {grid_n}x{grid_n} grid")]
    Dimension {
        macro_id: usize,
        width: usize,
        height: usize,
        grid_n: usize,
    },
    #[error("invalid netlist: {0}")]
    Invalid(String),
    #[error("infeasible synthetic config: {0}")]
    InfeasibleConfig(String),
}

/// Pin location relative to the lower-left corner of its macro, in grid units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinOffset {
    pub dx: f64,
    pub dy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Macro {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    pub pins: Vec<PinOffset>,
}

impl Macro {
    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn center_pin(width: usize, height: usize) -> PinOffset {
        PinOffset {
            dx: width as f64 / 2.0,
            dy: height as f64 / 2.0,
        }
    }
}

/// A hyperedge over macro pins `(macro_id, pin_index)` and fixed terminals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Net {
    pub endpoints: Vec<(usize, usize)>,
    pub terminals: Vec<(f64, f64)>,
}

impl Net {
    pub fn degree(&self) -> usize {
        self.endpoints.len() + self.terminals.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Netlist {
    pub name: String,
    pub grid_n: usize,
    pub macros: Vec<Macro>,
    pub nets: Vec<Net>,
}

impl Netlist {
    pub fn total_macro_area(&self) -> usize {
        self.macros.iter().map(Macro::area).sum()
    }

    pub fn density(&self) -> f64 {
        self.total_macro_area() as f64 / (self.grid_n * self.grid_n) as f64
    }

    /// Net indices touching each macro, in ascending order.
    pub fn nets_by_macro(&self) -> Vec<Vec<usize>> {
        let mut by_macro = vec![Vec::new(); self.macros.len()];
        for (ni, net) in self.nets.iter().enumerate() {
            for &(m, _) in &net.endpoints {
                if by_macro[m].last() != Some(&ni) {
                    by_macro[m].push(ni);
                }
            }
        }
        by_macro
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<(), NetlistError> {
        let n = self.grid_n;
        if n == 0 {
            return Err(NetlistError::Invalid("grid_n must be positive".into()));
        }
        for (i, m) in self.macros.iter().enumerate() {
            if m.id != i {
                return Err(NetlistError::Invalid(format!(
                    "macro ids must be 0..{} in order; found id {} at position {i}",
                    self.macros.len(),
                    m.id
                )));
            }
            if m.width == 0 || m.height == 0 || m.width > n || m.height > n {
                return Err(NetlistError::Dimension {
                    macro_id: m.id,
                    width: m.width,
                    height: m.height,
                    grid_n: n,
                });
            }
            for (pi, p) in m.pins.iter().enumerate() {
                let inside = p.dx.is_finite()
                    && p.dy.is_finite()
                    && (0.0..=m.width as f64).contains(&p.dx)
                    && (0.0..=m.height as f64).contains(&p.dy);
                if !inside {
                    return Err(NetlistError::Invalid(format!(
                        "pin {pi} of macro {} lies outside its {}x{} footprint",
                        m.id, m.width, m.height
                    )));
                }
            }
        }
        for (ni, net) in self.nets.iter().enumerate() {
            if net.degree() < 2 {
                return Err(NetlistError::Invalid(format!(
                    "net {ni} has {} endpoints and terminals; at least 2 are required",
                    net.degree()
                )));
            }
            for &(macro_id, pin) in &net.endpoints {
                let m = self
                    .macros
                    .get(macro_id)
                    .ok_or(NetlistError::DanglingMacro { net: ni, macro_id })?;
                if pin >= m.pins.len() {
                    return Err(NetlistError::DanglingPin {
                        net: ni,
                        macro_id,
                        pin,
                    });
                }
            }
            if net
                .terminals
                .iter()
                .any(|(x, y)| !x.is_finite() || !y.is_finite())
            {
                return Err(NetlistError::Invalid(format!(
                    "net {ni} has a non-finite terminal"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetlist {
    name: String,
    grid_n: usize,
    macros: Vec<RawMacro>,
    nets: Vec<RawNet>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMacro {
    id: usize,
    w: usize,
    h: usize,
    pins: Option<Vec<PinOffset>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNet {
    #[serde(default)]
    endpoints: Vec<[usize; 2]>,
    #[serde(default)]
    terminals: Vec<[f64; 2]>,
}

/// Parses and validates a `.netlist.json` document.
///
/// A macro without a `pins` key gets a single pin at its center.
pub fn parse_netlist(text: &str) -> Result<Netlist, NetlistError> {
    let raw: RawNetlist = serde_json::from_str(text).map_err(|e| NetlistError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut macros: Vec<Macro> = raw
        .macros
        .into_iter()
        .map(|m| Macro {
            id: m.id,
            width: m.w,
            height: m.h,
            pins: m.pins.unwrap_or_else(|| vec![Macro::center_pin(m.w, m.h)]),
        })
        .collect();
    macros.sort_by_key(|m| m.id);
    let netlist = Netlist {
        name: raw.name,
        grid_n: raw.grid_n,
        macros,
        nets: raw
            .nets
            .into_iter()
            .map(|n| Net {
                endpoints: n.endpoints.into_iter().map(|[m, p]| (m, p)).collect(),
                terminals: n.terminals.into_iter().map(|[x, y]| (x, y)).collect(),
            })
            .collect(),
    };
    netlist.validate()?;
    if netlist.density() > WARN_DENSITY {
        warn!(
            "netlist {} has macro density {:.3}, above {WARN_DENSITY}",
            netlist.name,
            netlist.density()
        );
    }
    Ok(netlist)
}

fn fixed(v: f64) -> String {
    // Avoid "-0.000000" so equal structures serialize identically.
    let s = format!("{v:.6}");
    if s.trim_start_matches('-')
        .bytes()
        .all(|b| b == b'0' || b == b'.')
    {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

/// Canonical text form: sorted keys, one macro or net per line, floats with 6 decimals.
pub fn serialize_netlist(n: &Netlist) -> String {
    let mut out = String::new();
    out.push_str("{\n");
    let _ = writeln!(out, "  \"grid_n\": {},", n.grid_n);
    out.push_str("  \"macros\": [");
    for (i, m) in n.macros.iter().enumerate() {
        let pins: Vec<String> = m
            .pins
            .iter()
            .map(|p| format!("{{\"dx\": {}, \"dy\": {}}}", fixed(p.dx), fixed(p.dy)))
            .collect();
        let _ = write!(
            out,
            "{}\n    {{\"h\": {}, \"id\": {}, \"pins\": [{}], \"w\": {}}}",
            if i == 0 { "" } else { "," },
            m.height,
            m.id,
            pins.join(", "),
            m.width
        );
    }
    out.push_str(if n.macros.is_empty() {
        "],\n"
    } else {
        "\n  ],\n"
    });
    let name = serde_json::to_string(&n.name).expect("string serialization");
    let _ = writeln!(out, "  \"name\": {name},");
    out.push_str("  \"nets\": [");
    for (i, net) in n.nets.iter().enumerate() {
        let eps: Vec<String> = net
            .endpoints
            .iter()
            .map(|(m, p)| format!("[{m}, {p}]"))
            .collect();
        let terms: Vec<String> = net
            .terminals
            .iter()
            .map(|(x, y)| format!("[{}, {}]", fixed(*x), fixed(*y)))
            .collect();
        let _ = write!(
            out,
            "{}\n    {{\"endpoints\": [{}], \"terminals\": [{}]}}",
            if i == 0 { "" } else { "," },
            eps.join(", "),
            terms.join(", ")
        );
    }
    out.push_str(if n.nets.is_empty() { "]\n" } else { "\n  ]\n" });
    out.push_str("}\n");
    out
}

/// Parameters of the seeded synthetic design generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub grid_n: usize,
    pub macro_count: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub net_count: usize,
    pub min_degree: usize,
    pub max_degree: usize,
    /// Probability that a net gets one fixed terminal on the canvas boundary.
    pub terminal_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid_n: 16,
            macro_count: 12,
            min_size: 2,
            max_size: 4,
            net_count: 16,
            min_degree: 2,
            max_degree: 4,
            terminal_prob: 0.3,
        }
    }
}

/// Builds a random design that is a pure function of `(cfg, seed)`.
///
/// Macro sizes are rejection-sampled until the total area fits within
/// [`MAX_DENSITY`]·N². Every macro carries one center pin. A net of degree `d`
/// connects `d` distinct macros, or `d - 1` macros plus one boundary terminal.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Netlist, NetlistError> {
    let infeasible = |m: String| Err(NetlistError::InfeasibleConfig(m));
    let n = cfg.grid_n;
    if n == 0 || cfg.macro_count == 0 {
        return infeasible("grid_n and macro_count must be positive".into());
    }
    if cfg.min_size == 0 || cfg.min_size > cfg.max_size || cfg.max_size > n {
        return infeasible(format!(
            "size range {}..{} is invalid for grid {n}",
            cfg.min_size, cfg.max_size
        ));
    }
    if cfg.min_degree < 2 || cfg.min_degree > cfg.max_degree {
        return infeasible(format!(
            "degree range {}..{} is invalid",
            cfg.min_degree, cfg.max_degree
        ));
    }
    if cfg.max_degree > cfg.macro_count + 1 {
        return infeasible(format!(
            "net degree {} exceeds {} macros plus one terminal",
            cfg.max_degree, cfg.macro_count
        ));
    }
    if !(0.0..=1.0).contains(&cfg.terminal_prob) {
        return infeasible("terminal_prob must lie in [0, 1]".into());
    }

    let budget = (MAX_DENSITY * (n * n) as f64).floor() as usize;
    let mut rng = rng::rng_for(seed, &[0x5EED]);
    let mut sizes = None;
    for _ in 0..MAX_SYNTH_ATTEMPTS {
        let draw: Vec<(usize, usize)> = (0..cfg.macro_count)
            .map(|_| {
                (
                    rng.gen_range(cfg.min_size..=cfg.max_size),
                    rng.gen_range(cfg.min_size..=cfg.max_size),
                )
            })
            .collect();
        if draw.iter().map(|(w, h)| w * h).sum::<usize>() <= budget {
            sizes = Some(draw);
            break;
        }
    }
    let Some(sizes) = sizes else {
        return infeasible(format!(
            "no macro size draw fit the area budget of {budget} cells after {MAX_SYNTH_ATTEMPTS} attempts"
        ));
    };

    let macros: Vec<Macro> = sizes
        .into_iter()
        .enumerate()
        .map(|(id, (w, h))| Macro {
            id,
            width: w,
            height: h,
            pins: vec![Macro::center_pin(w, h)],
        })
        .collect();

    let mut nets = Vec::with_capacity(cfg.net_count);
    for _ in 0..cfg.net_count {
        let degree = rng.gen_range(cfg.min_degree..=cfg.max_degree);
        let terminal = degree > cfg.macro_count || rng.gen_bool(cfg.terminal_prob);
        let k = degree - usize::from(terminal);
        let mut endpoints: Vec<(usize, usize)> = sample(&mut rng, cfg.macro_count, k)
            .into_iter()
            .map(|m| (m, 0))
            .collect();
        endpoints.sort_unstable();
        let terminals = if terminal {
            let t = rng.gen_range(0..=n) as f64;
            let edge = n as f64;
            vec![match rng.gen_range(0..4) {
                0 => (t, 0.0),
                1 => (edge, t),
                2 => (t, edge),
                _ => (0.0, t),
            }]
        } else {
            Vec::new()
        };
        nets.push(Net {
            endpoints,
            terminals,
        });
    }

    let netlist = Netlist {
        name: format!("synth-g{n}-m{}-s{seed}", cfg.macro_count),
        grid_n: n,
        macros,
        nets,
    };
    netlist.validate()?;
    Ok(netlist)
}

/// Placement order: descending area, ties by ascending id.
pub fn macro_order(n: &Netlist) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n.macros.len()).collect();
    ids.sort_by_key(|&i| (std::cmp::Reverse(n.macros[i].area()), i));
    ids
}
