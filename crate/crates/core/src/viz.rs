//! Static overlays: lane polylines, proposal markers and a lane-count label.

use image::{Rgb, RgbImage};

use crate::geometry::LanePolyline;

/// Instance colours, cycled.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
];

pub fn palette_color(k: usize) -> Rgb<u8> {
    Rgb(PALETTE[k % PALETTE.len()])
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Disc of radius `r` around `(x, y)`.
pub fn fill_disc(img: &mut RgbImage, x: f64, y: f64, r: f64, c: Rgb<u8>) {
    let ri = r.ceil() as i64;
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            if ((dx * dx + dy * dy) as f64) <= r * r {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

/// Thick polyline drawn as overlapping discs along each segment.
pub fn draw_polyline(img: &mut RgbImage, lane: &LanePolyline, width: f64, c: Rgb<u8>) {
    let r = (width / 2.0).max(0.5);
    for s in lane.points().windows(2) {
        let (a, b) = (s[0], s[1]);
        let n = ((b.x - a.x).abs().max((b.y - a.y).abs()) / (r * 0.5).max(0.5)).ceil().max(1.0) as usize;
        for k in 0..=n {
            let t = k as f64 / n as f64;
            fill_disc(img, a.x + t * (b.x - a.x), a.y + t * (b.y - a.y), r, c);
        }
    }
}

/// Hollow square marker centred on `(x, y)`.
pub fn draw_marker(img: &mut RgbImage, x: f64, y: f64, half: i64, c: Rgb<u8>) {
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for d in -half..=half {
        for w in 0..2 {
            put(img, cx + d, cy - half - w, c);
            put(img, cx + d, cy + half + w, c);
            put(img, cx - half - w, cy + d, c);
            put(img, cx + half + w, cy + d, c);
        }
    }
}

// 3x5 glyphs, one row per entry, bit 2 = left column
fn glyph(ch: char) -> [u8; 5] {
    match ch {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        'l' => [4, 4, 4, 4, 6],
        'a' => [0, 7, 1, 7, 7],
        'n' => [0, 6, 5, 5, 5],
        'e' => [0, 7, 7, 4, 7],
        's' => [0, 7, 6, 1, 7],
        _ => [0; 5],
    }
}

/// Draws `text` at `(x, y)` with a dark backing box. Each glyph pixel is a
/// `scale x scale` block.
pub fn draw_label(img: &mut RgbImage, text: &str, x: i64, y: i64, scale: i64) {
    let n = text.chars().count() as i64;
    let (w, h) = (n * 4 * scale + scale, 7 * scale);
    for dy in 0..h {
        for dx in 0..w {
            put(img, x + dx, y + dy, Rgb([0, 0, 0]));
        }
    }
    for (k, ch) in text.chars().enumerate() {
        let ox = x + scale + k as i64 * 4 * scale;
        for (row, bits) in glyph(ch).iter().enumerate() {
            for col in 0..3 {
                if bits & (4 >> col) != 0 {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            put(img, ox + col * scale + sx, y + scale + row as i64 * scale + sy, Rgb([255, 255, 255]));
                        }
                    }
                }
            }
        }
    }
}

pub fn lane_count_label(n: usize) -> String {
    format!("{n} lanes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;

    #[test]
    fn polyline_touches_its_points() {
        let mut img = RgbImage::new(40, 40);
        let lane = LanePolyline::new(vec![Point::new(5.0, 35.0), Point::new(30.0, 5.0)]).unwrap();
        draw_polyline(&mut img, &lane, 3.0, palette_color(1));
        assert_eq!(*img.get_pixel(5, 35), palette_color(1));
        assert_eq!(*img.get_pixel(30, 5), palette_color(1));
        assert_eq!(*img.get_pixel(35, 35), Rgb([0, 0, 0]));
    }

    #[test]
    fn palette_cycles() {
        assert_eq!(palette_color(0), palette_color(PALETTE.len()));
        let distinct: std::collections::HashSet<_> = PALETTE.iter().collect();
        assert_eq!(distinct.len(), PALETTE.len());
    }
}
