//! Boot a historian node with a TCP listener, then query it from another
//! connection through the same store interface used locally.

use std::sync::Arc;
use std::time::Duration;

use plantbus::harness::{NodeOptions, NodeRuntime, RemoteStore, QUERY_CHANNEL};
use plantbus::rtdb::{PlantStore, Sample};
use plantbus::session::Connection;
use plantbus::topology::parse_plan;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/plans/boiler.json"))?;
    let mut plan = parse_plan(&text)?;
    // Any free port will do.
    let port = std::net::TcpListener::bind("127.0.0.1:0")?.local_addr()?.port();
    plan.nodes[0].address = format!("127.0.0.1:{port}");

    let dir = tempfile::tempdir()?;
    let opts = NodeOptions {
        trend_dir: dir.path().into(),
        always_listen: true,
        ..Default::default()
    };
    let node = NodeRuntime::boot(Arc::new(plan), "a", &opts)?;
    let hist = node.historians()["hist"].clone();
    for k in 0..120u64 {
        hist.insert(Sample::new("steam.flow", k * 1000, 120.0 + k as f64 * 0.05))?;
    }
    hist.persist_closed(120_000)?;

    let conn = Connection::connect_tcp(&node.listen_addr().unwrap().to_string())?;
    let remote = RemoteStore::new(conn.open_channel(QUERY_CHANNEL)?).with_timeout(Duration::from_secs(2));
    println!("latest: {:?}", remote.latest("steam.flow")?);
    println!("range [100 s, 103 s): {} samples", remote.range("steam.flow", 100_000, 103_000)?.len());
    for p in remote.trend("steam.flow", 0, 40_000)? {
        println!("trend {} n={} mean={:.3}", p.interval_start_ms, p.count, p.mean);
    }
    println!("unknown variable: {}", remote.latest("nope").unwrap_err());
    conn.close();
    Ok(())
}
