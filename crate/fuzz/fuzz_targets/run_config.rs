#![no_main]
use libfuzzer_sys::fuzz_target;
use monoflow_cli::RunConfig;

fuzz_target!(|data: &str| {
    if let Ok(config) = RunConfig::parse(data) {
        let _ = config.params();
        let _ = config.terminations();
        assert_eq!(config.digest("solve").len(), 12);
    }
});
