//! Layout rendering. Cell (0, 0) is drawn at the bottom-left.

use std::fmt::Write as _;

use eim_core::{Layout, Netlist};

const CELL: usize = 32;
const PALETTE: [&str; 6] = [
    "#8fb8de", "#f4a582", "#a6d96a", "#fdd49e", "#c2a5cf", "#80cdc1",
];

/// Canvas, grid lines, one `<rect>` per placed macro with its id, and a dot
/// per pin. The caller is expected to have validated the layout.
pub fn render_layout(netlist: &Netlist, layout: &Layout) -> String {
    let n = netlist.grid_n;
    let side = n * CELL;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{side}" viewBox="0 0 {side} {side}">"#
    );
    let _ = writeln!(
        out,
        r##"<rect class="canvas" x="0" y="0" width="{side}" height="{side}" fill="#ffffff" stroke="#000000" stroke-width="2"/>"##
    );
    let _ = write!(out, r##"<g stroke="#d0d0d0" stroke-width="1">"##);
    for i in 1..n {
        let p = i * CELL;
        let _ = write!(
            out,
            r#"<line x1="{p}" y1="0" x2="{p}" y2="{side}"/><line x1="0" y1="{p}" x2="{side}" y2="{p}"/>"#
        );
    }
    out.push_str("</g>\n");

    let to_svg_y = |y: f64| side as f64 - y * CELL as f64;
    for &[id, x, y] in &layout.placements {
        let m = &netlist.macros[id];
        let (px, py) = (x * CELL, side - (y + m.height) * CELL);
        let (w, h) = (m.width * CELL, m.height * CELL);
        let fill = PALETTE[id % PALETTE.len()];
        let _ = writeln!(
            out,
            r##"<rect class="macro" x="{px}" y="{py}" width="{w}" height="{h}" fill="{fill}" stroke="#333333" stroke-width="1"/>"##
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="monospace" font-size="12" text-anchor="middle">{id}</text>"#,
            px + w / 2,
            py + h / 2 + 4
        );
        for pin in &m.pins {
            let cx = (x as f64 + pin.dx) * CELL as f64;
            let cy = to_svg_y(y as f64 + pin.dy);
            let _ = writeln!(
                out,
                r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="#b2182b"/>"##
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use eim_core::netlist::{generate_synthetic, SynthConfig};
    use std::sync::Arc;

    #[test]
    fn empty_layout_has_only_the_canvas() {
        let d = generate_synthetic(&SynthConfig::default(), 1).unwrap();
        let l = Layout {
            netlist: d.name.clone(),
            grid_n: d.grid_n,
            placements: vec![],
        };
        let svg = render_layout(&d, &l);
        assert_eq!(svg.matches("<rect").count(), 1);
        assert_eq!(svg.matches("<line").count(), 2 * (d.grid_n - 1));
    }

    #[test]
    fn one_rect_per_placement_and_stable() {
        let d = Arc::new(generate_synthetic(&SynthConfig::default(), 1).unwrap());
        let l = eim_core::expert::generate_expert_layout(&d, 3).unwrap();
        let a = render_layout(&d, &l);
        assert_eq!(a.matches("<rect").count() - 1, l.placements.len());
        let pins: usize = d.macros.iter().map(|m| m.pins.len()).sum();
        assert_eq!(a.matches("<circle").count(), pins);
        assert_eq!(a, render_layout(&d, &l));
    }
}
