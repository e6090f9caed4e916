#![no_main]
use libfuzzer_sys::fuzz_target;
use monoflow::io::parse_vector;

fuzz_target!(|data: &str| {
    if let Ok(v) = parse_vector(data) {
        let text: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
        let back = parse_vector(&text.join(",")).unwrap();
        assert_eq!(back, v);
    }
});
