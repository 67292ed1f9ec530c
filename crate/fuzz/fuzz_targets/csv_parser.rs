#![no_main]

use bllim::io::{format_csv, parse_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = parse_csv(data, "fuzz.csv") {
        assert_eq!(table.header.len(), table.values.ncols());
        assert!(table.values.iter().all(|v| v.is_finite()));
        // anything accepted must survive a write/read cycle unchanged
        let text = format_csv(&table.header, &table.values).expect("header matches width");
        let again = parse_csv(text.as_bytes(), "again.csv").expect("formatted CSV parses");
        assert_eq!(again.values, table.values);
    }
});
