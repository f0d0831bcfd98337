use anyhow::Result;
use image::{Rgb, RgbImage};
use progseg::Volume;

const LA_COLOR: [u8; 3] = [0, 255, 0];
const SCAR_COLOR: [u8; 3] = [255, 0, 0];
const SCAR_OPACITY: f64 = 0.6;

fn invalid(msg: String) -> anyhow::Error {
    progseg::Error::InvalidInput(msg).into()
}

pub struct OverlayInput<'a> {
    pub image: &'a Volume,
    pub la: Option<&'a Volume>,
    pub scar: Option<&'a Volume>,
}

/// Axial slices tiled row-major into one RGB mosaic: grey image windowed to
/// its min/max, red scar fill, green LA contour on top. Each voxel becomes a
/// `scale` x `scale` block.
pub fn render(input: &OverlayInput, slices: &[usize], scale: u32) -> Result<RgbImage> {
    let img = input.image;
    let [nx, ny, nz] = img.dims();
    for v in [input.la, input.scar].into_iter().flatten() {
        img.ensure_same_grid(v, "overlay")?;
    }
    if slices.is_empty() || scale == 0 {
        return Err(invalid("overlay needs at least one slice and scale >= 1".into()));
    }
    if let Some(&z) = slices.iter().find(|&&z| z >= nz) {
        return Err(invalid(format!("slice {z} out of range (volume has {nz} slices)")));
    }
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let cols = (slices.len() as f64).sqrt().ceil() as usize;
    let rows = slices.len().div_ceil(cols);
    let s = scale as usize;
    let mut out = RgbImage::new((cols * nx * s) as u32, (rows * ny * s) as u32);

    let on = |v: Option<&Volume>, x: isize, y: isize, z: usize| -> bool {
        match v {
            Some(v) if x >= 0 && y >= 0 && (x as usize) < nx && (y as usize) < ny => {
                v.get(x as usize, y as usize, z) > 0.5
            }
            _ => false,
        }
    };

    for (t, &z) in slices.iter().enumerate() {
        let (ox, oy) = ((t % cols) * nx * s, (t / cols) * ny * s);
        for y in 0..ny {
            for x in 0..nx {
                let g = ((img.get(x, y, z) - lo) / span * 255.0).round().clamp(0.0, 255.0);
                let mut px = [g; 3];
                let (xi, yi) = (x as isize, y as isize);
                if on(input.scar, xi, yi, z) {
                    for (c, sc) in px.iter_mut().zip(SCAR_COLOR) {
                        *c = (1.0 - SCAR_OPACITY) * *c + SCAR_OPACITY * sc as f64;
                    }
                }
                let contour = on(input.la, xi, yi, z)
                    && [(-1, 0), (1, 0), (0, -1), (0, 1)]
                        .iter()
                        .any(|&(dx, dy)| !on(input.la, xi + dx, yi + dy, z));
                if contour {
                    px = LA_COLOR.map(f64::from);
                }
                let rgb = Rgb(px.map(|c| c as u8));
                // Image rows run top to bottom; flip y so anterior is up.
                let py = oy + (ny - 1 - y) * s;
                for dy in 0..s {
                    for dx in 0..s {
                        out.put_pixel((ox + x * s + dx) as u32, (py + dy) as u32, rgb);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use progseg::VolumeKind;

    #[test]
    fn colors_contour_and_fill() {
        let sp = [1.0; 3];
        let image = Volume::intensity_from_fn([5, 5, 1], sp, |x, _, _| x as f64).unwrap();
        let la = Volume::label_from_fn([5, 5, 1], sp, |x, y, _| (1..4).contains(&x) && (1..4).contains(&y)).unwrap();
        let mut scar = vec![0.0; 25];
        scar[la.index(2, 2, 0)] = 1.0;
        let scar = la.with_data(scar, VolumeKind::Label).unwrap();
        let input = OverlayInput {
            image: &image,
            la: Some(&la),
            scar: Some(&scar),
        };
        let out = render(&input, &[0], 1).unwrap();
        assert_eq!(out.dimensions(), (5, 5));
        // Voxel (1,1) is on the LA boundary; image row = 4 - y.
        assert_eq!(out.get_pixel(1, 3).0, LA_COLOR);
        let centre = out.get_pixel(2, 2).0;
        assert!(centre[0] > 200 && centre[1] < 100);
        assert_eq!(out.get_pixel(0, 0).0, [0, 0, 0]);
        assert!(render(&input, &[1], 1).is_err());
    }
}
