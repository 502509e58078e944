//! Builds crop-and-flip groups for a few synthetic CIFAR-format images and
//! shows that regeneration with the same seed is exact.
//!
//! ```bash
//! cargo run --release -p mmel --example image_groups
//! ```

use mmel::augment::{build_image_group, Payload};
use mmel::data::{decode_cifar, encode_cifar, synthetic_cifar};

fn main() -> mmel::Result<()> {
    let records = synthetic_cifar(4, 3, "demo");
    let data = decode_cifar(&encode_cifar(&records)?, "demo-")?;
    for sample in &data.samples {
        let group = build_image_group(sample, 4, 4, 11)?;
        let again = build_image_group(sample, 4, 4, 11)?;
        assert_eq!(group, again);
        let Payload::Image(orig) = &group.original else {
            unreachable!()
        };
        let diffs: Vec<String> = group.members[1..]
            .iter()
            .map(|m| {
                let Payload::Image(img) = m else { unreachable!() };
                let d = img.data.iter().zip(&orig.data).map(|(a, b)| (a - b).abs()).sum::<f32>();
                format!("{:.1}", d / img.data.len() as f32 * 255.0)
            })
            .collect();
        println!(
            "{} label {:?} mean abs change per member [{}]",
            group.id,
            group.label,
            diffs.join(", ")
        );
    }
    Ok(())
}
