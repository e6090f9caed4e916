#![no_main]
use libfuzzer_sys::fuzz_target;
use monoflow::io::ProblemFile;

fuzz_target!(|data: &str| {
    let Ok(file) = ProblemFile::parse(data) else { return };
    if let Ok(problem) = file.to_problem() {
        let again = ProblemFile::from_problem(&problem).expect("affine polyhedral");
        assert!(ProblemFile::parse(&again.to_json()).unwrap().to_problem().is_ok());
    }
});
