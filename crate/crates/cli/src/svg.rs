//! SVG overlay: raster underlay, ground truth, the contour of every stage and
//! the final scores.

use std::fmt::Write as _;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use contour_forge::data::Scene;
use contour_forge::geometry::Point2;
use contour_forge::model::Detection;
use contour_forge::{Error, Result};

/// Stroke per stage; later stages reuse the last style.
const STAGE_STYLES: [(&str, &str); 3] = [
    ("#f5a623", "4 2"),
    ("#4a90e2", "2 2"),
    ("#2ecc40", "none"),
];

fn raster_png(scene: &Scene) -> Result<Vec<u8>> {
    let (w, h) = (scene.width(), scene.height());
    let pixels: Vec<u8> = scene.raster.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Data(format!("png: {e}")))?;
        writer.write_image_data(&pixels).map_err(|e| Error::Data(format!("png: {e}")))?;
    }
    Ok(buf)
}

/// Coordinates printed with the shortest round-trip form, the same numbers
/// the JSON output carries.
fn points_attr(pts: &[Point2]) -> String {
    pts.iter().map(|p| format!("{},{}", p.x, p.y)).collect::<Vec<_>>().join(" ")
}

/// Draws one group per stage `0..=stages`. A contour frozen by early stop
/// keeps appearing, unchanged, in the later stage groups.
pub fn render(scene: &Scene, dets: &[Detection], stages: usize) -> Result<String> {
    let (w, h) = (scene.width(), scene.height());
    let png = STANDARD.encode(raster_png(scene)?);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(
        s,
        r#"<g id="raster"><image x="0" y="0" width="{w}" height="{h}" style="image-rendering:pixelated" href="data:image/png;base64,{png}"/></g>"#
    );
    s.push_str("<g id=\"ground-truth\" fill=\"none\" stroke=\"#ff4136\" stroke-width=\"0.6\">\n");
    for p in &scene.polygons {
        let _ = writeln!(s, r#"<polygon points="{}"/>"#, points_attr(p.points()));
    }
    s.push_str("</g>\n");
    for k in 0..=stages {
        let (color, dash) = STAGE_STYLES[k.min(STAGE_STYLES.len() - 1)];
        let _ = writeln!(
            s,
            r#"<g id="stage-{k}" class="stage" fill="none" stroke="{color}" stroke-width="0.6" stroke-dasharray="{dash}">"#
        );
        for (i, d) in dets.iter().enumerate() {
            let c = d.history.get(k).unwrap_or(&d.contour);
            let _ = writeln!(s, r#"<polygon data-detection="{i}" points="{}"/>"#, points_attr(c.vertices()));
        }
        s.push_str("</g>\n");
    }
    s.push_str("<g id=\"scores\" font-family=\"monospace\" font-size=\"5\" fill=\"#ffffff\" stroke=\"#000000\" stroke-width=\"0.2\">\n");
    for (i, d) in dets.iter().enumerate() {
        let p = d.contour.vertices()[0];
        let _ = writeln!(s, r#"<text data-detection="{i}" x="{}" y="{}">{:.2}</text>"#, p.x, (p.y - 1.0).max(5.0), d.score);
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}
