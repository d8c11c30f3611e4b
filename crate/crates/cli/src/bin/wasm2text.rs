//! Prints the text format of a binary WebAssembly module.
//!
//! Usage: `wasmrev-wasm2text <module.wasm>`; the text goes to stdout.

use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [path] = args.as_slice() else {
        eprintln!("usage: wasmrev-wasm2text <module.wasm>");
        return ExitCode::from(2);
    };
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: reading {path}: {e}");
            return ExitCode::from(1);
        }
    };
    match wasmprinter::print_bytes(&bytes) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {path}: {e:#}");
            ExitCode::from(1)
        }
    }
}
