//! KNN graph, hop distances and the local attention mask for a synthetic
//! document.
//!
//!     cargo run --example hop_graph -- [k] [threshold]

use knnformer::data::{generate_synthetic, GenConfig};
use knnformer::geometry::{normalize_document, pairwise_sigma};
use knnformer::graph::{attention_mask, bucket_hops, build_knn_graph, hop_distances};

fn main() -> knnformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let k: usize = args.next().map_or(4, |s| s.parse().expect("k"));
    let t: u32 = args.next().map_or(2, |s| s.parse().expect("threshold"));

    let gen = GenConfig {
        templates: 1,
        docs_per_template: 1,
        ..GenConfig::default()
    };
    let doc = &generate_synthetic(&gen, 3)?.documents[0];
    let norm = normalize_document(doc, doc.page.w, doc.page.h)?;
    let sigma = pairwise_sigma(&norm)?;
    let n = norm.len();
    let graph = build_knn_graph(sigma.dist_matrix(), n, k)?;
    let hops = hop_distances(&graph);
    let mask = attention_mask(&hops, t)?;
    let buckets = bucket_hops(&hops, 4)?;

    println!("{} entities, k = {k}, diameter {}", n, hops.diameter());
    println!(
        "attention kept for {} of {} pairs at threshold {t}",
        mask.count_allowed(),
        n * n
    );
    let mut hist = [0usize; 6];
    for b in &buckets {
        hist[*b] += 1;
    }
    println!("bucket histogram (0..=4, unreachable): {hist:?}");

    println!("\nneighbors of the first 6 entities:");
    for i in 0..n.min(6) {
        let near: Vec<String> = graph
            .neighbors(i)
            .filter(|&j| j != i)
            .map(|j| format!("{:?}@{:.3}", norm.entities[j].text, sigma.dist(i, j)))
            .collect();
        println!("  {:>2} {:<22} -> {}", i, format!("{:?}", norm.entities[i].text), near.join(", "));
    }
    Ok(())
}
