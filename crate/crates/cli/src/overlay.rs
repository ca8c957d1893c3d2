//! PPM overlay of projected points on a class mask, with a pixel audit.

use lcsync::alignment::ProjectedSet;
use lcsync::SemanticMask;

pub const CLASS_RGB: [u8; 3] = [255, 215, 0];
pub const BACKGROUND_RGB: [u8; 3] = [32, 32, 40];
pub const POINT_RGB: [u8; 3] = [220, 20, 30];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OverlayAudit {
    pub splats: usize,
    /// Splats whose center pixel carries the class.
    pub centered_on_class: usize,
    /// Splats whose 3x3 footprint touches at least one class pixel.
    pub touching_class: usize,
}

impl OverlayAudit {
    pub fn off_class(&self) -> usize {
        self.splats - self.centered_on_class
    }
}

/// Renders class pixels in yellow over a dark background and each projected
/// point as a red 3x3 square. Returns the binary P6 image and the audit.
pub fn render(mask: &SemanticMask, class_id: u32, projected: &ProjectedSet) -> (Vec<u8>, OverlayAudit) {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let is_class = |u: i64, v: i64| u >= 0 && v >= 0 && (u as usize) < w && (v as usize) < h && mask.get(u as u32, v as u32) as u32 == class_id;
    let mut rgb = Vec::with_capacity(w * h * 3);
    for &c in &mask.classes {
        rgb.extend_from_slice(if c as u32 == class_id { &CLASS_RGB } else { &BACKGROUND_RGB });
    }
    let mut audit = OverlayAudit::default();
    for p in &projected.pixels {
        let (cu, cv) = (p.u.round() as i64, p.v.round() as i64);
        audit.splats += 1;
        audit.centered_on_class += is_class(cu, cv) as usize;
        let mut touches = false;
        for dv in -1..=1 {
            for du in -1..=1 {
                touches |= is_class(cu + du, cv + dv);
            }
        }
        audit.touching_class += touches as usize;
        // drawing happens after auditing so earlier splats do not hide classes
        for dv in -1..=1 {
            for du in -1..=1 {
                let (u, v) = (cu + du, cv + dv);
                if u >= 0 && v >= 0 && (u as usize) < w && (v as usize) < h {
                    let i = (v as usize * w + u as usize) * 3;
                    rgb[i..i + 3].copy_from_slice(&POINT_RGB);
                }
            }
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    (out, audit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lcsync::alignment::PixelPoint;

    #[test]
    fn header_size_and_colors() {
        let mut m = SemanticMask::filled(4, 3, 0);
        m.set(1, 1, 7);
        let (img, audit) = render(&m, 7, &ProjectedSet::default());
        let header = b"P6\n4 3\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(img.len(), header.len() + 4 * 3 * 3);
        let px = |u: usize, v: usize| &img[header.len() + (v * 4 + u) * 3..][..3];
        assert_eq!(px(1, 1), CLASS_RGB);
        assert_eq!(px(0, 0), BACKGROUND_RGB);
        assert_eq!(audit.splats, 0);
    }

    #[test]
    fn splat_is_three_by_three_and_audited() {
        let mut m = SemanticMask::filled(6, 6, 0);
        m.set(2, 2, 1);
        let set = ProjectedSet { pixels: vec![PixelPoint { u: 2.2, v: 1.8, source_index: 0 }, PixelPoint { u: 5.0, v: 5.0, source_index: 1 }] };
        let (img, audit) = render(&m, 1, &set);
        let off = b"P6\n6 6\n255\n".len();
        let red = (0..36).filter(|i| img[off + i * 3..off + i * 3 + 3] == POINT_RGB).count();
        // 9 for the first splat, 4 for the clipped corner one
        assert_eq!(red, 13);
        assert_eq!(audit, OverlayAudit { splats: 2, centered_on_class: 1, touching_class: 1 });
        assert_eq!(audit.off_class(), 1);
    }
}
