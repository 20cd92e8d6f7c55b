//! The placement MDP on an N×N grid.
//!
//! Macros are placed one per step in [`macro_order`]. An action is the cell of
//! the current macro's lower-left corner, encoded as `y * N + x`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::netlist::{macro_order, Macro, Netlist};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    OutOfGrid,
    Overlap,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::OutOfGrid => f.write_str("footprint leaves the grid"),
            Violation::Overlap => f.write_str("footprint overlaps a placed macro"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("episode is finished; every macro is placed")]
    EpisodeFinished,
    #[error("illegal action at cell {cell} ({x}, {y}): {violation}")]
    IllegalAction {
        cell: usize,
        x: usize,
        y: usize,
        violation: Violation,
    },
    #[error("no legal position for macro {macro_id} at step {step}")]
    NoLegalAction { step: usize, macro_id: usize },
    #[error("layout does not match netlist: {0}")]
    LayoutMismatch(String),
}

/// Lower-left anchor cell of the macro being placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(pub usize);

impl Action {
    pub fn from_xy(x: usize, y: usize, grid_n: usize) -> Self {
        Action(y * grid_n + x)
    }

    pub fn xy(self, grid_n: usize) -> (usize, usize) {
        (self.0 % grid_n, self.0 / grid_n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacementState {
    netlist: Arc<Netlist>,
    order: Arc<[usize]>,
    occupancy: Vec<bool>,
    placements: Vec<Option<(usize, usize)>>,
    cursor: usize,
}

#[derive(Clone, Copy)]
struct BBox {
    count: usize,
    min_x: f64,
    max_x: f64,
    min_y: f64,
    max_y: f64,
}

impl BBox {
    const EMPTY: BBox = BBox {
        count: 0,
        min_x: f64::INFINITY,
        max_x: f64::NEG_INFINITY,
        min_y: f64::INFINITY,
        max_y: f64::NEG_INFINITY,
    };

    fn add(&mut self, x: f64, y: f64) {
        self.count += 1;
        self.min_x = self.min_x.min(x);
        self.max_x = self.max_x.max(x);
        self.min_y = self.min_y.min(y);
        self.max_y = self.max_y.max(y);
    }

    fn half_perimeter(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.max_x - self.min_x) + (self.max_y - self.min_y)
        }
    }
}

impl PlacementState {
    pub fn reset(netlist: Arc<Netlist>) -> Self {
        let n = netlist.grid_n;
        let order: Arc<[usize]> = macro_order(&netlist).into();
        Self {
            occupancy: vec![false; n * n],
            placements: vec![None; netlist.macros.len()],
            order,
            netlist,
            cursor: 0,
        }
    }

    pub fn netlist(&self) -> &Arc<Netlist> {
        &self.netlist
    }

    pub fn grid_n(&self) -> usize {
        self.netlist.grid_n
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn is_done(&self) -> bool {
        self.cursor == self.netlist.macros.len()
    }

    /// Lower-left cell of each macro, indexed by macro id.
    pub fn placements(&self) -> &[Option<(usize, usize)>] {
        &self.placements
    }

    pub fn current_macro(&self) -> Option<&Macro> {
        self.order
            .get(self.cursor)
            .map(|&id| &self.netlist.macros[id])
    }

    fn require_current(&self) -> Result<&Macro, EnvError> {
        self.current_macro().ok_or(EnvError::EpisodeFinished)
    }

    /// Legal anchor cells for the current macro.
    ///
    /// Uses a summed-area table of occupancy so each cell is O(1).
    pub fn position_mask(&self) -> Result<Vec<bool>, EnvError> {
        let m = self.require_current()?;
        let n = self.grid_n();
        let stride = n + 1;
        let mut sat = vec![0u32; stride * stride];
        for y in 0..n {
            for x in 0..n {
                sat[(y + 1) * stride + x + 1] = u32::from(self.occupancy[y * n + x])
                    + sat[y * stride + x + 1]
                    + sat[(y + 1) * stride + x]
                    - sat[y * stride + x];
            }
        }
        let mut mask = vec![false; n * n];
        for y in 0..=n - m.height {
            for x in 0..=n - m.width {
                let (x1, y1) = (x + m.width, y + m.height);
                let covered = sat[y1 * stride + x1] + sat[y * stride + x]
                    - sat[y * stride + x1]
                    - sat[y1 * stride + x];
                mask[y * n + x] = covered == 0;
            }
        }
        Ok(mask)
    }

    pub fn legal_actions(&self) -> Result<Vec<Action>, EnvError> {
        Ok(self
            .position_mask()?
            .iter()
            .enumerate()
            .filter_map(|(c, &ok)| ok.then_some(Action(c)))
            .collect())
    }

    fn check_action(&self, m: &Macro, a: Action) -> Result<(), EnvError> {
        let n = self.grid_n();
        let (x, y) = a.xy(n);
        let err = |violation| EnvError::IllegalAction {
            cell: a.0,
            x,
            y,
            violation,
        };
        if a.0 >= n * n || x + m.width > n || y + m.height > n {
            return Err(err(Violation::OutOfGrid));
        }
        for yy in y..y + m.height {
            if self.occupancy[yy * n + x..yy * n + x + m.width]
                .iter()
                .any(|&o| o)
            {
                return Err(err(Violation::Overlap));
            }
        }
        Ok(())
    }

    /// Places the current macro in place. Returns `done`.
    pub fn step_in_place(&mut self, a: Action) -> Result<bool, EnvError> {
        let m = self.require_current()?;
        self.check_action(m, a)?;
        let (w, h, id) = (m.width, m.height, m.id);
        let n = self.grid_n();
        let (x, y) = a.xy(n);
        for yy in y..y + h {
            self.occupancy[yy * n + x..yy * n + x + w].fill(true);
        }
        self.placements[id] = Some((x, y));
        self.cursor += 1;
        Ok(self.is_done())
    }

    /// Pure transition: returns the successor and leaves `self` untouched.
    pub fn step(&self, a: Action) -> Result<(PlacementState, bool), EnvError> {
        let mut next = self.clone();
        let done = next.step_in_place(a)?;
        Ok((next, done))
    }

    fn pin_position(&self, macro_id: usize, pin: usize) -> Option<(f64, f64)> {
        let (x, y) = self.placements[macro_id]?;
        let p = self.netlist.macros[macro_id].pins[pin];
        Some((x as f64 + p.dx, y as f64 + p.dy))
    }

    /// Sum of per-net half perimeters over resolved points (terminals plus pins
    /// of placed macros). Nets with fewer than two resolved points add 0.
    pub fn hpwl(&self) -> f64 {
        self.netlist
            .nets
            .iter()
            .map(|net| {
                let mut bb = BBox::EMPTY;
                for &(tx, ty) in &net.terminals {
                    bb.add(tx, ty);
                }
                for &(m, p) in &net.endpoints {
                    if let Some((px, py)) = self.pin_position(m, p) {
                        bb.add(px, py);
                    }
                }
                bb.half_perimeter()
            })
            .sum()
    }

    /// HPWL increase for placing the current macro at each cell; `None` on illegal cells.
    pub fn raw_wire_deltas(&self) -> Result<Vec<Option<f64>>, EnvError> {
        let mask = self.position_mask()?;
        let m = self.current_macro().expect("checked by position_mask");
        let n = self.grid_n();

        // For every net on the current macro: bbox of the other resolved points
        // and the macro's own pin offsets on that net.
        let mut touched = Vec::new();
        for net in &self.netlist.nets {
            let own: Vec<(f64, f64)> = net
                .endpoints
                .iter()
                .filter(|&&(mid, _)| mid == m.id)
                .map(|&(_, p)| (m.pins[p].dx, m.pins[p].dy))
                .collect();
            if own.is_empty() {
                continue;
            }
            let mut bb = BBox::EMPTY;
            for &(tx, ty) in &net.terminals {
                bb.add(tx, ty);
            }
            for &(mid, p) in &net.endpoints {
                if mid != m.id {
                    if let Some((px, py)) = self.pin_position(mid, p) {
                        bb.add(px, py);
                    }
                }
            }
            touched.push((bb, own));
        }

        Ok(mask
            .iter()
            .enumerate()
            .map(|(c, &legal)| {
                if !legal {
                    return None;
                }
                let (x, y) = (c % n, c / n);
                let delta = touched
                    .iter()
                    .map(|(before, own)| {
                        let mut after = *before;
                        for &(dx, dy) in own {
                            after.add(x as f64 + dx, y as f64 + dy);
                        }
                        after.half_perimeter() - before.half_perimeter()
                    })
                    .sum();
                Some(delta)
            })
            .collect())
    }

    /// Min-max normalized wire deltas over legal cells; illegal cells are 1.
    /// A constant raw map normalizes to 0 everywhere legal.
    pub fn wire_mask(&self) -> Result<Vec<f64>, EnvError> {
        let raw = self.raw_wire_deltas()?;
        Ok(normalize_wire(&raw))
    }

    pub fn view_mask(&self) -> Vec<f64> {
        self.occupancy
            .iter()
            .map(|&o| f64::from(u8::from(o)))
            .collect()
    }

    pub fn feature_maps(&self) -> Result<FeatureMaps, EnvError> {
        let raw = self.raw_wire_deltas()?;
        let m = self.current_macro().expect("checked by raw_wire_deltas");
        let n = self.grid_n() as f64;
        Ok(FeatureMaps {
            grid_n: self.grid_n(),
            view: self.view_mask(),
            position: raw
                .iter()
                .map(|r| f64::from(u8::from(r.is_some())))
                .collect(),
            wire: normalize_wire(&raw),
            macro_w: m.width as f64 / n,
            macro_h: m.height as f64 / n,
            progress: self.cursor as f64 / self.netlist.macros.len() as f64,
        })
    }

    /// Short stable fingerprint of the placed macros.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.netlist.name.as_bytes());
        h.update((self.cursor as u64).to_le_bytes());
        for p in &self.placements {
            match p {
                Some((x, y)) => {
                    h.update([1u8]);
                    h.update((*x as u64).to_le_bytes());
                    h.update((*y as u64).to_le_bytes());
                }
                None => h.update([0u8]),
            }
        }
        h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Placed macros in placement order.
    pub fn to_layout(&self) -> Layout {
        Layout {
            netlist: self.netlist.name.clone(),
            grid_n: self.grid_n(),
            placements: self.order[..self.cursor]
                .iter()
                .map(|&id| {
                    let (x, y) = self.placements[id].expect("placed before cursor");
                    [id, x, y]
                })
                .collect(),
        }
    }

    /// Fraction of placed macros whose footprint touches the canvas edge.
    pub fn boundary_fraction(&self) -> f64 {
        let n = self.grid_n();
        let placed: Vec<_> = self
            .placements
            .iter()
            .enumerate()
            .filter_map(|(id, p)| p.map(|xy| (id, xy)))
            .collect();
        if placed.is_empty() {
            return 0.0;
        }
        let touching = placed
            .iter()
            .filter(|(id, (x, y))| {
                let m = &self.netlist.macros[*id];
                *x == 0 || *y == 0 || x + m.width == n || y + m.height == n
            })
            .count();
        touching as f64 / placed.len() as f64
    }
}

fn normalize_wire(raw: &[Option<f64>]) -> Vec<f64> {
    let (lo, hi) = raw
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    raw.iter()
        .map(|r| match r {
            None => 1.0,
            Some(_) if span <= 0.0 => 0.0,
            Some(v) => (v - lo) / span,
        })
        .collect()
}

/// Dense wirelength reward: the negative HPWL increase of one step.
pub fn dense_hpwl_reward(s: &PlacementState, _a: Action, s_next: &PlacementState) -> f64 {
    -(s_next.hpwl() - s.hpwl())
}

/// Number of feature channels produced by [`FeatureMaps::flatten`].
pub const CHANNELS: usize = 6;

/// Per-state input features; every channel is N×N.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub grid_n: usize,
    pub view: Vec<f64>,
    pub position: Vec<f64>,
    pub wire: Vec<f64>,
    pub macro_w: f64,
    pub macro_h: f64,
    pub progress: f64,
}

impl FeatureMaps {
    /// Channel-major `[view, position, wire, w, h, progress]`, length 6·N².
    pub fn flatten(&self) -> Vec<f64> {
        let cells = self.grid_n * self.grid_n;
        let mut out = Vec::with_capacity(CHANNELS * cells);
        out.extend_from_slice(&self.view);
        out.extend_from_slice(&self.position);
        out.extend_from_slice(&self.wire);
        out.extend(std::iter::repeat_n(self.macro_w, cells));
        out.extend(std::iter::repeat_n(self.macro_h, cells));
        out.extend(std::iter::repeat_n(self.progress, cells));
        out
    }

    pub fn legal(&self) -> Vec<bool> {
        self.position.iter().map(|&p| p > 0.5).collect()
    }
}

/// A (possibly partial) placement, macros listed in placement order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layout {
    pub netlist: String,
    pub grid_n: usize,
    /// `[macro_id, x, y]` triples.
    pub placements: Vec<[usize; 3]>,
}

impl Layout {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("layout serialization") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Replays the layout from reset, requiring the canonical order.
    pub fn replay(&self, netlist: Arc<Netlist>) -> Result<PlacementState, EnvError> {
        if self.grid_n != netlist.grid_n {
            return Err(EnvError::LayoutMismatch(format!(
                "grid {} vs netlist grid {}",
                self.grid_n, netlist.grid_n
            )));
        }
        let mut s = PlacementState::reset(netlist);
        for (t, &[id, x, y]) in self.placements.iter().enumerate() {
            if s.order.get(t) != Some(&id) {
                return Err(EnvError::LayoutMismatch(format!(
                    "step {t} places macro {id}, expected {:?}",
                    s.order.get(t)
                )));
            }
            let n = s.grid_n();
            if x >= n || y >= n {
                return Err(EnvError::IllegalAction {
                    cell: y * n + x,
                    x,
                    y,
                    violation: Violation::OutOfGrid,
                });
            }
            s.step_in_place(Action::from_xy(x, y, n))?;
        }
        Ok(s)
    }
}
