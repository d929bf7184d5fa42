//! SVG rendering of token matchings between two views.
//!
//! Views are drawn side by side, one square per pixel, and every source token
//! is joined to its matched target token by a line segment. Segments whose
//! mask entry is false are dashed.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{GeoParams, Matching, PosEncoding};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VizOptions {
    /// Figure units per view pixel.
    pub scale: f64,
    /// Horizontal space between the two panels, in figure units.
    pub gap: f64,
    pub stroke_width: f64,
}

impl Default for VizOptions {
    fn default() -> Self {
        Self {
            scale: 8.0,
            gap: 24.0,
            stroke_width: 1.5,
        }
    }
}

/// One side of the figure.
#[derive(Clone, Copy, Debug)]
pub struct Panel<'a> {
    pub image: &'a Image,
    pub geo: &'a GeoParams,
    pub pos: &'a PosEncoding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub source: usize,
    pub target: usize,
    pub from: [f64; 2],
    pub to: [f64; 2],
    pub dashed: bool,
}

/// Left edge of panel `b` in figure units.
pub fn second_panel_offset(a: &Panel, opts: &VizOptions) -> f64 {
    a.image.width() as f64 * opts.scale + opts.gap
}

/// Figure-frame point of an original-image coordinate seen through `geo`.
pub fn to_figure(geo: &GeoParams, c: [f64; 2], offset_x: f64, scale: f64) -> [f64; 2] {
    let (x, y) = geo.original_to_view(c[0], c[1]);
    [offset_x + x * scale, y * scale]
}

/// Segment endpoints for `m`, which matches tokens of `a` to tokens of `b`.
pub fn segments(a: &Panel, b: &Panel, m: &Matching, opts: &VizOptions) -> Result<Vec<Segment>> {
    if m.len() != a.pos.len() || m.target.iter().any(|&t| t >= b.pos.len()) {
        return Err(Error::shape(
            "segments",
            format!(
                "matching of {} tokens for panels of {} and {}",
                m.len(),
                a.pos.len(),
                b.pos.len()
            ),
        ));
    }
    let off = second_panel_offset(a, opts);
    Ok(m.target
        .iter()
        .enumerate()
        .map(|(k, &t)| Segment {
            source: k,
            target: t,
            from: to_figure(a.geo, a.pos.centers[k], 0.0, opts.scale),
            to: to_figure(b.geo, b.pos.centers[t], off, opts.scale),
            dashed: !m.mask[k],
        })
        .collect())
}

fn channel(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn colour(k: usize, n: usize) -> String {
    let hue = 360.0 * k as f64 / n.max(1) as f64;
    format!("hsl({hue:.1},85%,50%)")
}

fn draw_image(svg: &mut String, img: &Image, offset_x: f64, scale: f64) {
    for y in 0..img.height() {
        for x in 0..img.width() {
            let [r, g, b] = img.pixel(y, x);
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{:.2}" width="{scale:.2}" height="{scale:.2}" fill="rgb({},{},{})"/>"#,
                offset_x + x as f64 * scale,
                y as f64 * scale,
                channel(r),
                channel(g),
                channel(b)
            );
        }
    }
}

/// Complete SVG document.
pub fn render_svg(a: &Panel, b: &Panel, m: &Matching, opts: &VizOptions) -> Result<String> {
    let segs = segments(a, b, m, opts)?;
    let off = second_panel_offset(a, opts);
    let width = off + b.image.width() as f64 * opts.scale;
    let height = a.image.height().max(b.image.height()) as f64 * opts.scale;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.2}" height="{height:.2}" viewBox="0 0 {width:.2} {height:.2}">"#
    );
    svg.push_str("<g shape-rendering=\"crispEdges\">\n");
    draw_image(&mut svg, a.image, 0.0, opts.scale);
    draw_image(&mut svg, b.image, off, opts.scale);
    svg.push_str("</g>\n<g fill=\"none\" stroke-linecap=\"round\">\n");
    for s in &segs {
        let dash = if s.dashed { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="{:.2}"{dash}/>"#,
            s.from[0],
            s.from[1],
            s.to[0],
            s.to[1],
            colour(s.source, segs.len()),
            opts.stroke_width
        );
    }
    svg.push_str("</g>\n</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{geometric_match, token_centers, DownscaleSpec};

    fn setup(ga: GeoParams, gb: GeoParams) -> (Image, Image, PosEncoding, PosEncoding, GeoParams, GeoParams) {
        let spec = DownscaleSpec::new(8).unwrap();
        let ia = Image::filled(ga.h, ga.w, [0.2, 0.4, 0.6]);
        let ib = Image::filled(gb.h, gb.w, [0.6, 0.4, 0.2]);
        let pa = token_centers(&ga, &spec).unwrap();
        let pb = token_centers(&gb, &spec).unwrap();
        (ia, ib, pa, pb, ga, gb)
    }

    #[test]
    fn identical_crops_give_parallel_solid_segments() {
        let g = GeoParams::full(32, 32, 16, 16, false);
        let (ia, ib, pa, pb, ga, gb) = setup(g, g);
        let m = geometric_match(&pa, &pb).unwrap();
        let opts = VizOptions::default();
        let (a, b) = (
            Panel {
                image: &ia,
                geo: &ga,
                pos: &pa,
            },
            Panel {
                image: &ib,
                geo: &gb,
                pos: &pb,
            },
        );
        let segs = segments(&a, &b, &m, &opts).unwrap();
        assert_eq!(segs.len(), 4);
        let shift = second_panel_offset(&a, &opts);
        for s in &segs {
            assert!(!s.dashed);
            assert_eq!(s.to[1], s.from[1]);
            assert!((s.to[0] - s.from[0] - shift).abs() < 1e-12);
        }
        let svg = render_svg(&a, &b, &m, &opts).unwrap();
        assert_eq!(svg.matches("<line").count(), 4);
        assert!(!svg.contains("stroke-dasharray"));
    }

    #[test]
    fn disjoint_crops_are_all_dashed() {
        let ga = GeoParams {
            ul_x: 0.0,
            ul_y: 0.0,
            lr_x: 10.0,
            lr_y: 10.0,
            h: 16,
            w: 16,
            flip: false,
        };
        let gb = GeoParams {
            ul_x: 20.0,
            ul_y: 20.0,
            lr_x: 30.0,
            lr_y: 30.0,
            h: 16,
            w: 16,
            flip: false,
        };
        let (ia, ib, pa, pb, ga, gb) = setup(ga, gb);
        let m = geometric_match(&pa, &pb).unwrap();
        let opts = VizOptions::default();
        let a = Panel {
            image: &ia,
            geo: &ga,
            pos: &pa,
        };
        let b = Panel {
            image: &ib,
            geo: &gb,
            pos: &pb,
        };
        let svg = render_svg(&a, &b, &m, &opts).unwrap();
        assert_eq!(svg.matches("stroke-dasharray").count(), 4);
    }

    #[test]
    fn endpoints_follow_view_frame_centres() {
        let ga = GeoParams {
            ul_x: 4.0,
            ul_y: 2.0,
            lr_x: 28.0,
            lr_y: 26.0,
            h: 16,
            w: 16,
            flip: true,
        };
        let gb = GeoParams::full(32, 32, 16, 16, false);
        let (ia, ib, pa, pb, ga, gb) = setup(ga, gb);
        let m = geometric_match(&pa, &pb).unwrap();
        let opts = VizOptions {
            scale: 3.0,
            gap: 5.0,
            stroke_width: 1.0,
        };
        let segs = segments(
            &Panel {
                image: &ia,
                geo: &ga,
                pos: &pa,
            },
            &Panel {
                image: &ib,
                geo: &gb,
                pos: &pb,
            },
            &m,
            &opts,
        )
        .unwrap();
        // token k sits at its grid cell of the drawn (flipped) view
        let expect = [[4.0, 4.0], [12.0, 4.0], [4.0, 12.0], [12.0, 12.0]];
        for (s, e) in segs.iter().zip(expect) {
            assert!((s.from[0] - 3.0 * e[0]).abs() < 1e-9 && (s.from[1] - 3.0 * e[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn mismatched_matching_is_rejected() {
        let g = GeoParams::full(32, 32, 16, 16, false);
        let (ia, ib, pa, pb, ga, gb) = setup(g, g);
        let mut m = geometric_match(&pa, &pb).unwrap();
        m.target[0] = 9;
        let a = Panel {
            image: &ia,
            geo: &ga,
            pos: &pa,
        };
        let b = Panel {
            image: &ib,
            geo: &gb,
            pos: &pb,
        };
        assert!(segments(&a, &b, &m, &VizOptions::default()).is_err());
    }
}
