#![no_main]

use libfuzzer_sys::fuzz_target;

// The JSON configuration parser is the only surface that consumes untrusted
// bytes; any input must yield Ok or a clean error, never a panic.
fuzz_target!(|data: &[u8]| {
    let _ = priorsat::config::parse_model_config(data);
});
