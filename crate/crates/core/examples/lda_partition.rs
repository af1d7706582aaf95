//! Dirichlet (LDA) label skew across clients: the mean largest-class share
//! per client for several concentrations, plus a few class histograms.
//!
//! ```text
//! cargo run --release --example lda_partition -- [clients]
//! ```

use fedacc::data::{heterogeneity, partition, Dataset, PartitionScheme, PartitionSpec};
use fedacc::numerics::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let clients: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(100);
    let (n, classes) = (50_000, 10);
    // Partitioning only reads labels, so 1x1 images keep this cheap.
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let ds = Dataset::new(Tensor::zeros(&[n, 1, 1, 1]), labels, classes)?;

    for scheme in [
        PartitionScheme::Lda { alpha: 0.1 },
        PartitionScheme::Lda { alpha: 1.0 },
        PartitionScheme::Lda { alpha: 1000.0 },
        PartitionScheme::Iid,
    ] {
        let shards = partition(&ds, &PartitionSpec { scheme, num_clients: clients, seed: 0 })?;
        let sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
        println!(
            "{scheme:?}: mean max-class share {:.3}, shard sizes {}..{}",
            heterogeneity(&shards, ds.labels(), classes),
            sizes.iter().min().unwrap(),
            sizes.iter().max().unwrap()
        );
        for shard in shards.iter().take(3) {
            let mut hist = vec![0usize; classes];
            for &i in &shard.indices {
                hist[ds.labels()[i]] += 1;
            }
            println!("  client {}: {hist:?}", shard.client);
        }
    }
    Ok(())
}
