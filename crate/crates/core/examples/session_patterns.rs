//! The four session patterns over one connection: request/response, events,
//! streams and file transfer. Pass `tcp` to run the same code over loopback
//! TCP instead of the in-process transport.

use std::thread;
use std::time::Duration;

use plantbus::session::{Connection, SessionListener};

fn connect(tcp: bool) -> Result<(Connection, Connection), Box<dyn std::error::Error>> {
    if !tcp {
        return Ok(Connection::pair());
    }
    let listener = SessionListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr().to_string();
    let server = thread::spawn(move || listener.accept());
    let client = Connection::connect_tcp(&addr)?;
    Ok((client, server.join().unwrap()?))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tcp = std::env::args().any(|a| a == "tcp");
    let (a, b) = connect(tcp)?;
    println!("transport: {}", if tcp { "tcp" } else { "in-process" });

    // Request/response.
    let (client, server) = (a.open_channel(1)?, b.open_channel(1)?);
    let _svc = server.serve("upper", |args| Ok(args.to_ascii_uppercase()))?;
    let reply = client.call("upper", b"valve 3 open", Duration::from_secs(1))?;
    println!("rpc: {}", String::from_utf8_lossy(&reply));
    match client.call("missing", b"", Duration::from_millis(200)) {
        Err(e) => println!("rpc with no responder yet: {e}"),
        Ok(_) => unreachable!(),
    }

    // Events arrive in publish order.
    let (pubr, sub) = (a.open_channel(2)?, b.open_channel(2)?);
    let (tx, rx) = crossbeam_channel::unbounded();
    let _reg = sub.subscribe(move |p| {
        let _ = tx.send(String::from_utf8_lossy(p).into_owned());
    })?;
    for alarm in ["HI drum.level", "LO feed.temp", "ACK drum.level"] {
        pubr.publish(alarm.as_bytes())?;
    }
    for _ in 0..3 {
        println!("event: {}", rx.recv_timeout(Duration::from_secs(1))?);
    }

    // Streams: an ordered sequence of items with an explicit end.
    let (tx, rx) = (a.open_channel(3)?, b.open_channel(3)?);
    let mut out = tx.open_stream()?;
    for i in 0..5u32 {
        out.send(&i.to_be_bytes())?;
    }
    out.close()?;
    let mut input = rx.accept_stream(Some(Duration::from_secs(1)))?;
    let mut items = Vec::new();
    while let Some(item) = input.next_item()? {
        items.push(u32::from_be_bytes(item.try_into().unwrap()));
    }
    println!("stream items: {items:?}");

    // File transfer, checksummed end to end.
    let (tx, rx) = (a.open_channel(4)?, b.open_channel(4)?);
    let content: Vec<u8> = (0..200_000u32).map(|i| (i % 251) as u8).collect();
    let sent = tx.send_file("shift-log.bin", &content, 16 * 1024)?;
    let got = rx.recv_file(Some(Duration::from_secs(5)))?;
    println!(
        "file: {} {} bytes, crc {:08x}, intact {}",
        got.receipt.name,
        got.receipt.size_bytes,
        sent.checksum,
        got.content == content
    );

    a.close();
    b.close();
    Ok(())
}
