mod common;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use common::*;
use futures_util::StreamExt;
use irida::icu::{handle_control_line, ControlReply, Icu, IcuStats, Registry, Relay};
use tokio::io::AsyncWriteExt;
use tokio::net::UdpSocket;
use tokio::sync::oneshot;

struct Running {
    data: SocketAddr,
    control: SocketAddr,
    ws: SocketAddr,
    relay: Arc<Relay>,
    stop: Option<oneshot::Sender<()>>,
}

impl Drop for Running {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
    }
}

async fn start(icu: Icu) -> Running {
    let (tx, rx) = oneshot::channel();
    let running = Running {
        data: loopback(icu.data_addr()),
        control: loopback(icu.control_addr()),
        ws: loopback(icu.ws_addr().unwrap()),
        relay: icu.relay(),
        stop: Some(tx),
    };
    tokio::spawn(icu.run(async {
        let _ = rx.await;
    }));
    running
}

async fn start_default() -> Running {
    start(Icu::bind(&test_icu_config()).await.unwrap()).await
}

async fn register(icu: &Running) -> UdpSocket {
    let s = udp_listener().await;
    let port = s.local_addr().unwrap().port();
    assert_eq!(
        control(&s, icu.control, &format!("IVU_REGISTER {port}\n")).await,
        "OK REGISTERED"
    );
    s
}

async fn send_lines(to: SocketAddr, lines: &[String]) {
    let tx = udp_listener().await;
    for l in lines {
        tx.send_to(format!("{l}\n").as_bytes(), to).await.unwrap();
        // Keep the loopback queue shallow.
        tokio::time::sleep(Duration::from_micros(200)).await;
    }
}

fn varied_lines(n: usize, tag: &str) -> Vec<String> {
    (0..n)
        .map(|i| match i % 5 {
            0 => format!("heartBeat {tag}{i} 0.25 0.75"),
            1 => format!("addNeighbour {tag}{i} 0x01"),
            2 => format!("setText\t{tag}{i}   spaced    text"),
            3 => format!("bogus line {i}"),
            _ => format!("sendPacket {tag}{i} 0x02 Data"),
        })
        .collect()
}

fn expected_datagrams(lines: &[String]) -> Vec<Vec<u8>> {
    lines
        .iter()
        .map(|l| format!("{l}\n").into_bytes())
        .collect()
}

#[tokio::test]
async fn fanout_to_three_then_unregister_one() {
    let icu = start_default().await;
    let ivus = [
        register(&icu).await,
        register(&icu).await,
        register(&icu).await,
    ];
    assert_eq!(
        control(&ivus[0], icu.control, "STATUS").await,
        "OK STATUS ivus=3 lines_in=0 lines_out=0"
    );

    let first = varied_lines(100, "a");
    send_lines(icu.data, &first).await;
    for ivu in &ivus {
        let got = drain(ivu, Duration::from_millis(300)).await;
        assert_eq!(got, expected_datagrams(&first));
    }

    let port = ivus[2].local_addr().unwrap().port();
    assert_eq!(
        control(&ivus[2], icu.control, &format!("IVU_UNREGISTER {port}")).await,
        "OK UNREGISTERED"
    );
    assert_eq!(
        control(&ivus[2], icu.control, &format!("IVU_UNREGISTER {port}")).await,
        "ERR NOT_REGISTERED"
    );

    let second = varied_lines(50, "b");
    send_lines(icu.data, &second).await;
    assert_eq!(
        drain(&ivus[0], Duration::from_millis(300)).await,
        expected_datagrams(&second)
    );
    assert_eq!(
        drain(&ivus[1], Duration::from_millis(300)).await,
        expected_datagrams(&second)
    );
    assert!(drain(&ivus[2], Duration::from_millis(300)).await.is_empty());

    let status = icu.relay.status();
    assert_eq!(status.ivus, 2);
    assert_eq!(status.lines_in, 150);
    assert_eq!(status.lines_out, 300 + 100);
}

#[tokio::test]
async fn multi_line_datagrams_are_split() {
    let icu = start_default().await;
    let ivu = register(&icu).await;
    let tx = udp_listener().await;
    tx.send_to(
        b"heartBeat 0x00\r\n\nheartBeat 0x01\nheartBeat 0x02",
        icu.data,
    )
    .await
    .unwrap();
    let got = drain(&ivu, Duration::from_millis(300)).await;
    assert_eq!(
        got,
        vec![
            b"heartBeat 0x00\n".to_vec(),
            b"heartBeat 0x01\n".to_vec(),
            b"heartBeat 0x02\n".to_vec()
        ]
    );
}

#[tokio::test]
async fn control_plane_replies() {
    let icu = start_default().await;
    let s = udp_listener().await;
    let port = s.local_addr().unwrap().port();
    assert_eq!(
        control(&s, icu.control, &format!("IVU_PING {port}")).await,
        "ERR NOT_REGISTERED"
    );
    assert_eq!(
        control(&s, icu.control, &format!("IVU_REGISTER {port}")).await,
        "OK REGISTERED"
    );
    assert_eq!(
        control(&s, icu.control, &format!("IVU_REGISTER {port}")).await,
        "OK REGISTERED"
    );
    assert_eq!(
        control(&s, icu.control, &format!("IVU_PING {port}")).await,
        "OK PONG"
    );
    assert_eq!(
        control(&s, icu.control, "IVU_REGISTER").await,
        "ERR BAD_REQUEST"
    );
    assert_eq!(
        control(&s, icu.control, "IVU_REGISTER 0").await,
        "ERR BAD_REQUEST"
    );
    assert_eq!(control(&s, icu.control, "HELLO").await, "ERR BAD_REQUEST");
    let status = ControlReply::parse(&control(&s, icu.control, "STATUS").await).unwrap();
    assert_eq!(
        status,
        ControlReply::Status {
            ivus: 1,
            lines_in: 0,
            lines_out: 0
        }
    );
    assert_eq!(
        icu.relay
            .stats()
            .bad_requests
            .load(std::sync::atomic::Ordering::Relaxed),
        3
    );
}

#[test]
fn ttl_expiry_with_mock_clock() {
    let mut reg = Registry::new(Duration::from_secs(60), 10);
    let stats = IcuStats::default();
    let a: SocketAddr = "127.0.0.1:40000".parse().unwrap();
    let b: SocketAddr = "127.0.0.1:40001".parse().unwrap();
    handle_control_line(&mut reg, &stats, "IVU_REGISTER 40000", a, 0);
    handle_control_line(&mut reg, &stats, "IVU_REGISTER 40001", b, 0);
    assert_eq!(
        handle_control_line(&mut reg, &stats, "IVU_PING 40001", b, 30_000),
        ControlReply::Pong
    );
    assert!(reg.sweep(60_000).is_empty());
    assert_eq!(reg.sweep(60_001), vec![a]);
    assert_eq!(
        handle_control_line(&mut reg, &stats, "IVU_PING 40000", a, 60_002),
        ControlReply::NotRegistered
    );
    assert!(reg.sweep(90_000).is_empty());
    assert_eq!(reg.sweep(90_001), vec![b]);
    assert!(reg.is_empty());
}

#[test]
fn repeated_send_failures_evict() {
    let mut reg = Registry::new(Duration::from_secs(60), 3);
    let a: SocketAddr = "127.0.0.1:40000".parse().unwrap();
    reg.register(a, 0);
    assert!(!reg.record_send(&a, false));
    assert!(!reg.record_send(&a, true));
    assert!(!reg.record_send(&a, false));
    assert!(!reg.record_send(&a, false));
    assert!(reg.record_send(&a, false));
    assert!(reg.is_empty());
}

#[tokio::test]
async fn websocket_relays_each_line_as_a_text_frame() {
    let icu = start_default().await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{}/stream", icu.ws))
        .await
        .unwrap();
    for _ in 0..200 {
        if icu.relay.ws_subscribers() > 0 {
            break;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let lines = varied_lines(20, "w");
    send_lines(icu.data, &lines).await;
    let mut got = Vec::new();
    while got.len() < lines.len() {
        let msg = tokio::time::timeout(Duration::from_secs(2), ws.next())
            .await
            .unwrap()
            .unwrap()
            .unwrap();
        got.push(msg.into_text().unwrap().to_string());
    }
    assert_eq!(got, lines);
}

#[tokio::test]
async fn websocket_other_paths_are_refused() {
    let icu = start_default().await;
    let err = tokio_tungstenite::connect_async(format!("ws://{}/other", icu.ws))
        .await
        .unwrap_err();
    match err {
        tokio_tungstenite::tungstenite::Error::Http(resp) => assert_eq!(resp.status(), 404),
        other => panic!("unexpected {other:?}"),
    }
}

#[tokio::test]
async fn byte_stream_source_is_relayed() {
    let mut icu = Icu::bind(&test_icu_config()).await.unwrap();
    let (mut writer, reader) = tokio::io::duplex(64);
    icu.add_line_stream("serial", reader);
    let icu = start(icu).await;
    let ivu = register(&icu).await;
    writer
        .write_all(b"heartBeat 0x0a 0.1 0.2\r\nsetText 0x0a ")
        .await
        .unwrap();
    writer
        .write_all(b"two  words\naddNeighbour 0x0a 0x0b\n")
        .await
        .unwrap();
    writer.write_all(b"heartBeat 0x0a").await.unwrap();
    drop(writer);
    let got = drain(&ivu, Duration::from_millis(300)).await;
    assert_eq!(
        got,
        vec![
            b"heartBeat 0x0a 0.1 0.2\n".to_vec(),
            b"setText 0x0a two  words\n".to_vec(),
            b"addNeighbour 0x0a 0x0b\n".to_vec(),
            b"heartBeat 0x0a\n".to_vec(),
        ]
    );
}

#[tokio::test]
async fn validate_counts_but_still_relays() {
    let config = irida::icu::IcuConfig {
        validate: true,
        ..test_icu_config()
    };
    let icu = start(Icu::bind(&config).await.unwrap()).await;
    let ivu = register(&icu).await;
    let lines: Vec<String> = vec![
        "heartBeat 0x00 0.5 0.5".into(),
        "bogus 1 2".into(),
        "heartBeat 0x00 7 7".into(),
    ];
    send_lines(icu.data, &lines).await;
    assert_eq!(
        drain(&ivu, Duration::from_millis(300)).await,
        expected_datagrams(&lines)
    );
    assert_eq!(icu.relay.status().parse_failures, 2);
}
