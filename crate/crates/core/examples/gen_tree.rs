//! Generates a synthetic airway tree and prints its structure.
//!
//! ```text
//! cargo run --example gen_tree -- 4 7
//! ```

use bronchonav::skeleton::{generate_tree, tree_to_json};
use bronchonav::TreeGenConfig;

fn main() -> bronchonav::Result<()> {
    let mut args = std::env::args().skip(1);
    let depth = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(7);
    let tree = generate_tree(&TreeGenConfig::with_depth(depth, seed))?;

    println!("{} airways, hash {}", tree.len(), tree.content_hash());
    for id in tree.ids() {
        let a = tree.airway(id);
        let indent = "  ".repeat(tree.generation(id)?);
        println!(
            "{indent}{id}: length {:.1} mm, radius {:.2} mm, children {:?}",
            a.length(),
            a.radius[0],
            a.children.iter().map(|c| c.0).collect::<Vec<_>>()
        );
    }
    let leaf = tree.leaves().last().unwrap();
    println!("path to {leaf}: {:?}", tree.path_to(leaf)?.iter().map(|a| a.0).collect::<Vec<_>>());
    println!("JSON size: {} bytes", tree_to_json(&tree).len());
    Ok(())
}
