//! Four-panel localization figure: input, attention map, finalized region,
//! and the cropped-out rescaled result.

use image::{Rgb, RgbImage};

use sal_core::pipeline::SalLocalization;
use sal_core::tensor::ImageTensor;

const SCALE: u32 = 4;
const GAP: u32 = 2;

fn px(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn rgb_panel(t: &ImageTensor) -> RgbImage {
    let mut out = RgbImage::new(t.width() as u32, t.height() as u32);
    for r in 0..t.height() {
        for c in 0..t.width() {
            out.put_pixel(
                c as u32,
                r as u32,
                Rgb([px(t.get(r, c, 0)), px(t.get(r, c, 1)), px(t.get(r, c, 2))]),
            );
        }
    }
    out
}

fn attention_panel(att: &ImageTensor) -> RgbImage {
    let mut out = RgbImage::new(att.width() as u32, att.height() as u32);
    for r in 0..att.height() {
        for c in 0..att.width() {
            let g = px(att.get(r, c, 0).clamp(0.0, 1.0) * 255.0);
            out.put_pixel(c as u32, r as u32, Rgb([g, g, g]));
        }
    }
    out
}

/// Input dimmed outside the final box, with the box outline drawn on top.
fn region_panel(img: &ImageTensor, loc: &SalLocalization) -> RgbImage {
    let bb = &loc.step3.bbox;
    let mut out = RgbImage::new(img.width() as u32, img.height() as u32);
    for r in 0..img.height() {
        for c in 0..img.width() {
            let inside = r >= bb.r0 && r <= bb.r1 && c >= bb.c0 && c <= bb.c1;
            let dim = if inside { 1.0 } else { 0.3 };
            let border = inside
                && (r == bb.r0 || r == bb.r1 || c == bb.c0 || c == bb.c1);
            let p = if border {
                Rgb([255, 225, 40])
            } else {
                Rgb([
                    px(img.get(r, c, 0) * dim),
                    px(img.get(r, c, 1) * dim),
                    px(img.get(r, c, 2) * dim),
                ])
            };
            out.put_pixel(c as u32, r as u32, p);
        }
    }
    out
}

fn blit_scaled(canvas: &mut RgbImage, panel: &RgbImage, x0: u32) {
    for y in 0..panel.height() * SCALE {
        for x in 0..panel.width() * SCALE {
            canvas.put_pixel(x0 + x, y, *panel.get_pixel(x / SCALE, y / SCALE));
        }
    }
}

pub fn four_panel(img: &ImageTensor, loc: &SalLocalization) -> RgbImage {
    let panels = [
        rgb_panel(img),
        attention_panel(&loc.attention),
        region_panel(img, loc),
        rgb_panel(&loc.step3.crop),
    ];
    let side = img.height() as u32 * SCALE;
    let width = panels.iter().map(|p| p.width() * SCALE).sum::<u32>() + GAP * 3;
    let mut canvas = RgbImage::from_pixel(width, side, Rgb([255, 255, 255]));
    let mut x = 0;
    for p in &panels {
        blit_scaled(&mut canvas, p, x);
        x += p.width() * SCALE + GAP;
    }
    canvas
}
