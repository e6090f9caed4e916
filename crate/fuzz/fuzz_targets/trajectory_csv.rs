#![no_main]
use libfuzzer_sys::fuzz_target;
use monoflow::io::read_trajectory_csv;

// Any accepted table must be rectangular and indexable.
fuzz_target!(|data: &str| {
    if let Ok(table) = read_trajectory_csv(data) {
        let _ = table.times();
        for row in 0..table.rows.len() {
            let _ = table.x(row);
        }
    }
});
