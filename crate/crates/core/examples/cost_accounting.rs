//! Expected cost of a routing mix relative to always answering locally.

use confroute::router::{action_counts, Action, CostModel};

fn main() {
    let cost = CostModel::default();
    let mixes: [(&str, [u64; 4]); 3] = [
        ("mostly local", [70, 20, 8, 2]),
        ("cautious", [40, 30, 20, 10]),
        ("always large", [0, 0, 100, 0]),
    ];
    for (name, counts) in mixes {
        let m = cost.mean_cost(&counts).expect("non-empty mix");
        println!("{name:<13} {counts:?} -> {m:.2}x");
    }

    let observed = [Action::Local, Action::Local, Action::Rag, Action::Human];
    let counts = action_counts(&observed);
    println!(
        "observed {counts:?} -> {:.2}x",
        cost.mean_cost(&counts).unwrap()
    );
}
