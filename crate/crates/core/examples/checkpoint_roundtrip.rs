//! The checkpoint container: encode a parameter set, inspect the JSON header,
//! decode it bitwise, and watch the CRC reject a flipped blob byte.
//!
//! ```text
//! cargo run --release --example checkpoint_roundtrip
//! ```

use std::collections::BTreeMap;

use fedacc::adapters::{init_trainable, AdapterMethod};
use fedacc::backbone::{Backbone, BackboneConfig};
use fedacc::persistence::{decode, encode, load, save};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut bb = Backbone::<f32>::init(&BackboneConfig::toy(), 0)?;
    bb.freeze();
    let params = init_trainable(&AdapterMethod::default(), &bb, 8, 1)?;
    let meta = BTreeMap::from([("kind".to_string(), "example".to_string())]);

    let bytes = encode(&params, &meta);
    let header_len = u64::from_le_bytes(bytes[..8].try_into()?) as usize;
    let header = std::str::from_utf8(&bytes[8..8 + header_len])?;
    println!("{} bytes: {header_len}-byte header, {} blob bytes, 8-byte CRC", bytes.len(), bytes.len() - 16 - header_len);
    println!("header starts: {}...", &header[..header.len().min(160)]);

    let back = decode::<f32>(&bytes)?;
    assert!(back.params.bitwise_eq(&params));
    assert_eq!(encode(&back.params, &back.meta), bytes);
    println!("decoded {} tensors bitwise equal, re-encoding is byte-identical", back.params.len());

    let mut bad = bytes.clone();
    bad[8 + header_len + 5] ^= 0x10;
    match decode::<f32>(&bad) {
        Err(e) => println!("flipped one blob bit: {e}"),
        Ok(_) => unreachable!("a corrupted blob must not decode"),
    }
    match decode::<f64>(&bytes) {
        Err(e) => println!("loading as f64: {e}"),
        Ok(_) => unreachable!("dtype is checked"),
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("adapter.ckpt");
    save(&path, &params, &meta)?;
    assert!(load::<f32>(&path)?.params.bitwise_eq(&params));
    println!("file roundtrip through {} ok", path.display());
    Ok(())
}
