//! SVG rendering of layouts.

use std::fmt::Write;

use iucl_core::layout::{Category, Layout};

/// Fill and stroke color of each category.
pub fn category_color(category: Category) -> &'static str {
    match category {
        Category::Text => "blue",
        Category::Logo => "red",
        Category::Underlay => "green",
        Category::Embellishment => "orange",
        Category::None => "gray",
    }
}

/// Prints a coordinate rounded to 1/1000 of a canvas unit, without trailing zeros.
fn num(v: f64) -> String {
    let r = (v * 1000.0).round() / 1000.0;
    // avoid "-0"
    format!("{}", if r == 0.0 { 0.0 } else { r })
}

/// One `<rect>` per element in element order, in canvas units.
pub fn render_svg(layout: &Layout) -> String {
    let (w, h) = (layout.canvas_w as f64, layout.canvas_h as f64);
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {} {}\" width=\"{}\" height=\"{}\">",
        layout.canvas_w, layout.canvas_h, layout.canvas_w, layout.canvas_h
    );
    for e in layout.elements() {
        let b = &e.bbox;
        let color = category_color(e.category);
        let _ = writeln!(
            out,
            "  <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{color}\" fill-opacity=\"0.4\" stroke=\"{color}\" data-category=\"{}\"/>",
            num(b.left() * w),
            num(b.top() * h),
            num(b.w * w),
            num(b.h * h),
            e.category.name()
        );
    }
    out.push_str("</svg>\n");
    out
}
