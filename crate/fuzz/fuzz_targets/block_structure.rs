#![no_main]

use bllim::io::parse_block_structure;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&dim, rest)) = data.split_first() else {
        return;
    };
    let Ok(text) = std::str::from_utf8(rest) else {
        return;
    };
    if let Ok(s) = parse_block_structure(text, dim as usize) {
        assert_eq!(s.dim(), dim as usize);
        for p in s.clusters() {
            let mut all: Vec<usize> = p.groups().concat();
            all.sort_unstable();
            assert_eq!(all, (0..dim as usize).collect::<Vec<_>>());
        }
        let again = serde_json::to_string(&s.to_one_based()).unwrap();
        assert_eq!(parse_block_structure(&again, dim as usize).unwrap(), s);
    }
});
