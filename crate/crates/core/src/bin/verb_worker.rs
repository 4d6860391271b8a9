//! Reference worker: serves framed requests on stdin/stdout with the builtin
//! verb interpreter. Exits on EOF.

use std::io::{self, BufReader, BufWriter};

use toolrl_core::sandbox::builtin::run_script;
use toolrl_core::sandbox::wire::{read_frame, write_frame, WireRequest, WireResponse};

fn handle(frame: &[u8]) -> WireResponse {
    let req: WireRequest = match serde_json::from_slice(frame) {
        Ok(r) => r,
        Err(e) => {
            let id = serde_json::from_slice::<serde_json::Value>(frame)
                .ok()
                .and_then(|v| v.get("id").and_then(|i| i.as_u64()))
                .unwrap_or(0);
            return WireResponse::protocol_error(id, format!("bad request: {e}"));
        }
    };
    let resp = match req.to_request() {
        Ok(r) => run_script(&r),
        Err(e) => return WireResponse::protocol_error(req.id, e),
    };
    WireResponse::from_response(req.id, &resp).unwrap_or_else(|e| WireResponse::protocol_error(req.id, e))
}

fn main() -> io::Result<()> {
    let mut input = BufReader::new(io::stdin().lock());
    let mut output = BufWriter::new(io::stdout().lock());
    while let Some(frame) = read_frame(&mut input)? {
        let resp = handle(&frame);
        write_frame(&mut output, &serde_json::to_vec(&resp)?)?;
    }
    Ok(())
}
