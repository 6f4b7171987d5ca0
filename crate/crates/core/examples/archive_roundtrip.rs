//! Write and read back a GWTA archive, then show what a corrupt file
//! reports.
//!
//! cargo run --example archive_roundtrip

use gaia::archive::Entry;
use gaia::{Archive, SampleBatch, Tensor};

fn main() -> gaia::Result<()> {
    let mut weights = Archive::new();
    weights.insert_f32("conv.weight", Tensor::new(vec![2, 1, 3, 3], (0..18).map(|v| v as f32 * 0.1).collect())?);
    weights.insert_f32("conv.bias", Tensor::new(vec![2], vec![0.5, -0.5])?);
    weights.insert("labels", Entry::I32 { shape: vec![3], data: vec![0, 2, 1] });

    let bytes = weights.to_bytes()?;
    let back = Archive::from_bytes(&bytes)?;
    assert_eq!(back, weights);
    println!("{} tensors, {} bytes", back.len(), bytes.len());
    for (name, entry) in back.iter() {
        println!("  {name} {:?} {:?}", entry.dtype(), entry.shape());
    }

    let images = Tensor::new(vec![3, 1, 2, 2], vec![0.0; 12])?;
    let batch = SampleBatch::new(images, Some(vec![0, 2, 1]), "toy")?;
    let again = SampleBatch::from_archive(&Archive::from_bytes(&batch.to_archive().to_bytes()?)?, "toy")?;
    println!("dataset: {} samples, labels {:?}", again.len(), again.labels.as_deref().unwrap_or(&[]));

    let mut bad = bytes.clone();
    bad.truncate(bytes.len() - 3);
    println!("truncated: {}", Archive::from_bytes(&bad).unwrap_err());
    bad = bytes.clone();
    bad[0] = b'X';
    println!("bad magic: {}", Archive::from_bytes(&bad).unwrap_err());
    Ok(())
}
