//! Request/response latency over both transports, reported as quantiles.
//!
//! cargo run --release --example rpc_latency -- [n] [payload]

use std::thread;
use std::time::Duration;

use plantbus::harness::measure_rpc;
use plantbus::session::{Connection, SessionListener};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let payload: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(64);

    let listener = SessionListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr().to_string();
    let accept = thread::spawn(move || listener.accept());
    let tcp_client = Connection::connect_tcp(&addr)?;
    let tcp_server = accept.join().unwrap()?;

    for (label, (a, b)) in [("in-process", Connection::pair()), ("tcp", (tcp_client, tcp_server))] {
        let client = a.open_channel(1)?;
        let server = b.open_channel(1)?;
        let _echo = server.serve("echo", |args| Ok(args.to_vec()))?;
        let (report, _) = measure_rpc(&client, n, payload, Duration::from_secs(5))?;
        let q = report.quantiles_us;
        println!(
            "{label:<10} n={} min {:.1} p50 {:.1} p90 {:.1} p99 {:.1} max {:.1} us",
            report.sample_count, report.min_us, q.p50, q.p90, q.p99, report.max_us
        );
        a.close();
        b.close();
    }
    Ok(())
}
