//! Regenerates demo/corpus.jsonl: ten byte-tokenized prompt/response pairs,
//! one of which is deliberately too long for the demo context window so the
//! probe stage has something to skip.
//!
//!     cargo run -p gradsift-core --example build_demo_corpus [OUT_PATH]

use std::collections::BTreeMap;
use std::path::PathBuf;

use gradsift_core::io::{write_trajectory_corpus, TrajectoryRecord};
use gradsift_core::probe::byte_tokenize;

const PAIRS: &[(&str, &str, &str)] = &[
    (
        "nav-01",
        "Find the kettle in the kitchen.",
        "I check the counter first; the kettle is next to the stove, so I pick it up.",
    ),
    (
        "nav-02",
        "Put the mug on the shelf.",
        "The mug is already in my hand. I walk to the shelf and place it on the middle board.",
    ),
    (
        "shop-01",
        "Buy a red cotton shirt under 20 dollars.",
        "Searching for red cotton shirt. The second result is 14 dollars; I open it and order.",
    ),
    (
        "shop-02",
        "Order two packs of AA batteries.",
        "I search for AA batteries, set the quantity to two, and confirm the purchase.",
    ),
    (
        "calc-01",
        "What is 17 times 23?",
        "17 * 23 = 17 * 20 + 17 * 3 = 340 + 51 = 391.",
    ),
    (
        "calc-02",
        "Round 2.718 to one decimal.",
        "The second decimal is 1, so 2.718 rounds down to 2.7.",
    ),
    (
        "sort-01",
        "Sort the list 3, 1, 2.",
        "Smallest first: 1, then 2, then 3. The sorted list is 1, 2, 3.",
    ),
    (
        "sort-02",
        "Is the word level a palindrome?",
        "Reversed, level spells level, so yes, it is a palindrome.",
    ),
    (
        "plan-01",
        "Plan a morning with one errand.",
        "Coffee at eight, post office at nine, back at the desk by ten.",
    ),
    (
        // response_start lands beyond the 128-byte demo context, so this one
        // is skipped at probe time
        "long-01",
        "Summarize the following report about quarterly logistics performance across all regional \
         warehouses, including staffing, throughput and incident counts.",
        "The report covers four regions and shows throughput up six percent.",
    ),
];

fn main() {
    let out: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "demo/corpus.jsonl".to_string())
        .into();
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).expect("create output directory");
    }

    let records: Vec<TrajectoryRecord> = PAIRS
        .iter()
        .map(|(id, prompt, response)| {
            let mut tokens = byte_tokenize(prompt);
            let response_start = tokens.len();
            tokens.extend(byte_tokenize(response));
            let mut metadata = BTreeMap::new();
            metadata.insert(
                "task".to_string(),
                id.split('-').next().unwrap().to_string(),
            );
            TrajectoryRecord {
                trajectory_id: id.to_string(),
                tokens,
                response_start,
                metadata,
            }
        })
        .collect();

    write_trajectory_corpus(&out, &records).expect("write corpus");
    println!("wrote {} trajectories -> {}", records.len(), out.display());
}
