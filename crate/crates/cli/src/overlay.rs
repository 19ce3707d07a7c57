use image::{Rgb, RgbImage};
use orefsdet::RoiBox;

/// Draws a `thickness`-pixel rectangle outline, clipped to the image.
pub fn draw_box(img: &mut RgbImage, b: &RoiBox, color: Rgb<u8>, thickness: u32) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, y0) = (b.x1.floor() as i64, b.y1.floor() as i64);
    let (x1, y1) = (b.x2.ceil() as i64 - 1, b.y2.ceil() as i64 - 1);
    let t = thickness as i64;
    for y in y0.max(0)..=y1.min(h - 1) {
        for x in x0.max(0)..=x1.min(w - 1) {
            let edge = x - x0 < t || x1 - x < t || y - y0 < t || y1 - y < t;
            if edge {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outline_only() {
        let mut img = RgbImage::new(10, 10);
        draw_box(&mut img, &RoiBox::new(2.0, 2.0, 8.0, 8.0), Rgb([255, 0, 0]), 1);
        assert_eq!(img.get_pixel(2, 2)[0], 255);
        assert_eq!(img.get_pixel(7, 5)[0], 255);
        assert_eq!(img.get_pixel(5, 5)[0], 0);
        assert_eq!(img.get_pixel(8, 8)[0], 0);
    }
}
