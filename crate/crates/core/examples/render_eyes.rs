//! Render a strip of toy eyes, raw and domain-shifted, to a PNG.
//!
//! Usage: `cargo run --example render_eyes -- out.png [size]`

use synthrefine::eyegen::{render_sample, DatasetSpec, DomainShiftConfig};
use synthrefine::io::save_image;
use synthrefine::ImageTensor;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "eyes.png".into());
    let size: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(64);
    let n = 8;
    let raw = DatasetSpec::new(n, 0.5, None, size, 1);
    let shifted = DatasetSpec::new(n, 0.5, Some(DomainShiftConfig::pseudo_real(0)), size, 1);
    let rows: Vec<Vec<ImageTensor>> = [raw, shifted]
        .iter()
        .map(|spec| (0..n).map(|i| render_sample(spec, i).map(|s| s.image)).collect())
        .collect::<Result<_, _>>()?;
    let strip = ImageTensor::from_fn(2 * size, n * size, |c, y, x| rows[y / size][x / size].get(c, y % size, x % size))?;
    save_image(&strip, std::path::Path::new(&out))?;
    Ok(())
}
