//! Control unit, simulated grid and headless visualizer wired together in
//! one process.

use std::future::Future;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::icu::{Icu, IcuConfig, IcuError, StatusSnapshot};
use crate::ivu::{spawn_headless, IvuError, IvuOptions, IvuReport};
use crate::net_state::{FadeConfig, Millis};
use crate::sim::{LiveError, Script, SimConfig, SimStats};

#[derive(Debug, Clone)]
pub struct DemoOptions {
    pub sim: SimConfig,
    pub script: Script,
    /// Virtual run length; `None` runs until shutdown.
    pub duration_ms: Option<Millis>,
    pub icu: IcuConfig,
    pub record: Option<PathBuf>,
    pub dump_on_exit: Option<PathBuf>,
    pub fade: FadeConfig,
    /// How long to keep relaying after the grid stops, so in-flight lines land.
    pub drain: Duration,
}

impl Default for DemoOptions {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            script: Script::default(),
            duration_ms: None,
            icu: IcuConfig {
                ws_port: Some(crate::icu::DEFAULT_DATA_PORT + 2),
                ..IcuConfig::default()
            },
            record: None,
            dump_on_exit: None,
            fade: FadeConfig::default(),
            drain: Duration::from_millis(300),
        }
    }
}

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Icu(#[from] IcuError),
    #[error(transparent)]
    Ivu(#[from] IvuError),
    #[error(transparent)]
    Sim(#[from] LiveError),
    #[error("simulation thread panicked")]
    SimPanic,
}

/// Addresses of the running pieces, handed to the `ready` callback.
#[derive(Debug, Clone)]
pub struct DemoEndpoints {
    pub data: SocketAddr,
    pub control: SocketAddr,
    pub ws_url: Option<String>,
    pub ivu: SocketAddr,
    pub status: StatusSnapshot,
}

#[derive(Debug)]
pub struct DemoReport {
    pub ivu: IvuReport,
    pub icu: StatusSnapshot,
    pub sim: SimStats,
}

fn loopback_for(addr: SocketAddr) -> SocketAddr {
    if addr.ip().is_unspecified() {
        let ip = if addr.is_ipv4() {
            IpAddr::V4(Ipv4Addr::LOCALHOST)
        } else {
            IpAddr::V6(std::net::Ipv6Addr::LOCALHOST)
        };
        SocketAddr::new(ip, addr.port())
    } else {
        addr
    }
}

/// Start everything, call `ready` once the visualizer is registered, and run
/// until the grid reaches `duration_ms` or `shutdown` resolves.
pub async fn run_demo(
    options: DemoOptions,
    ready: impl FnOnce(&DemoEndpoints),
    shutdown: impl Future<Output = ()>,
) -> Result<DemoReport, DemoError> {
    let icu = Icu::bind(&options.icu).await?;
    let data = loopback_for(icu.data_addr());
    let control = loopback_for(icu.control_addr());
    let ws_url = icu
        .ws_addr()
        .map(|a| format!("ws://{}{}", loopback_for(a), crate::icu::WS_PATH));
    let relay = icu.relay();
    let (icu_stop_tx, icu_stop_rx) = tokio::sync::oneshot::channel::<()>();
    let icu_task = tokio::spawn(icu.run(async {
        let _ = icu_stop_rx.await;
    }));

    let mut ivu_options = IvuOptions::new(control);
    ivu_options.bind = IpAddr::V4(Ipv4Addr::LOCALHOST);
    ivu_options.record = options.record.clone();
    ivu_options.dump_on_exit = options.dump_on_exit.clone();
    ivu_options.fade = options.fade;
    let mut ivu = spawn_headless(ivu_options).await?;
    ivu.wait_registered().await?;

    ready(&DemoEndpoints {
        data,
        control,
        ws_url,
        ivu: ivu.local_addr(),
        status: relay.status(),
    });

    let stop_flag = Arc::new(AtomicBool::new(false));
    let sim_config = SimConfig {
        icu_endpoint: Some(data),
        ..options.sim
    };
    let script = options.script;
    let duration = options.duration_ms;
    let flag = stop_flag.clone();
    let mut sim_task = tokio::task::spawn_blocking(move || {
        crate::sim::run_live(sim_config, &script, duration, &flag)
    });

    tokio::pin!(shutdown);
    let sim_result = tokio::select! {
        r = &mut sim_task => r,
        _ = &mut shutdown => {
            stop_flag.store(true, Ordering::Relaxed);
            sim_task.await
        }
    };
    let sim = sim_result.map_err(|_| DemoError::SimPanic)??;

    tokio::time::sleep(options.drain).await;
    let ivu_report = ivu.stop().await?;
    let _ = icu_stop_tx.send(());
    let icu_status = icu_task.await.unwrap_or_else(|_| relay.status());
    Ok(DemoReport {
        ivu: ivu_report,
        icu: icu_status,
        sim,
    })
}
