use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use log::{debug, info, warn};
use tungstenite::{Message, WebSocket};

use super::pipeline::{PipelineEvent, PipelineHandle, PipelineStats};
use super::protocol::{ClientMessage, ServerMessage};
use super::queue::{queue, OverflowPolicy, QueueSender};
use super::transfer::TransferConfig;
use super::RuntimeResult;
use crate::signal::Marker;

const OUTBOX_CAPACITY: usize = 256;
const POLL: Duration = Duration::from_millis(5);

/// WebSocket endpoint that fans server messages out to every connected
/// console and collects their config edits and game events.
pub struct WsHub;

pub struct WsHubHandle {
    outbox: QueueSender<ServerMessage>,
    config_updates: Receiver<TransferConfig>,
    markers: Receiver<Marker>,
    sync: Sender<TransferConfig>,
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl WsHub {
    /// Bind `addr` and start serving. `config` is the snapshot sent to
    /// clients on join.
    pub fn bind(addr: &str, config: TransferConfig) -> RuntimeResult<WsHubHandle> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let (outbox, out_rx, _) = queue(OUTBOX_CAPACITY, OverflowPolicy::DropOldest, stop.clone());
        let (new_tx, new_rx) = unbounded::<WebSocket<TcpStream>>();
        let (cfg_tx, cfg_rx) = unbounded();
        let (marker_tx, marker_rx) = unbounded();
        let (sync_tx, sync_rx) = unbounded();

        let s = stop.clone();
        let accept = std::thread::Builder::new().name("mibci-ws-accept".into()).spawn(move || {
            while !s.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, peer)) => match handshake(stream) {
                        Ok(ws) => {
                            info!("console connected from {peer}");
                            if new_tx.send(ws).is_err() {
                                break;
                            }
                        }
                        Err(e) => warn!("handshake with {peer} failed: {e}"),
                    },
                    Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
                    Err(e) => {
                        warn!("accept failed: {e}");
                        std::thread::sleep(POLL);
                    }
                }
            }
        })?;

        let s = stop.clone();
        let hub = std::thread::Builder::new().name("mibci-ws-hub".into()).spawn(move || {
            let mut state = HubState { clients: Vec::new(), config, cfg_tx, marker_tx };
            while !s.load(Ordering::Relaxed) {
                for ws in new_rx.try_iter() {
                    state.join(ws);
                }
                for cfg in sync_rx.try_iter() {
                    state.config = cfg;
                }
                match out_rx.recv_timeout(POLL) {
                    Ok(first) => {
                        state.broadcast(&first);
                        for msg in out_rx.try_iter() {
                            state.broadcast(&msg);
                        }
                    }
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => break,
                }
                state.poll_clients();
            }
            for mut c in state.clients {
                let _ = c.close(None);
                let _ = c.flush();
            }
        })?;

        Ok(WsHubHandle {
            outbox,
            config_updates: cfg_rx,
            markers: marker_rx,
            sync: sync_tx,
            addr: local,
            stop,
            threads: vec![accept, hub],
        })
    }
}

fn handshake(stream: TcpStream) -> Result<WebSocket<TcpStream>, String> {
    stream.set_nonblocking(false).map_err(|e| e.to_string())?;
    stream.set_read_timeout(Some(Duration::from_secs(2))).map_err(|e| e.to_string())?;
    let ws = tungstenite::accept(stream).map_err(|e| e.to_string())?;
    ws.get_ref().set_read_timeout(None).map_err(|e| e.to_string())?;
    ws.get_ref().set_nonblocking(true).map_err(|e| e.to_string())?;
    ws.get_ref().set_nodelay(true).map_err(|e| e.to_string())?;
    Ok(ws)
}

fn would_block(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if io.kind() == ErrorKind::WouldBlock)
}

struct HubState {
    clients: Vec<WebSocket<TcpStream>>,
    config: TransferConfig,
    cfg_tx: Sender<TransferConfig>,
    marker_tx: Sender<Marker>,
}

impl HubState {
    fn join(&mut self, mut ws: WebSocket<TcpStream>) {
        let snapshot = ServerMessage::config(&self.config).to_json();
        match ws.send(Message::Text(snapshot)) {
            Ok(()) => self.clients.push(ws),
            Err(e) if would_block(&e) => self.clients.push(ws),
            Err(e) => debug!("client dropped during join: {e}"),
        }
    }

    fn broadcast(&mut self, msg: &ServerMessage) {
        let text = msg.to_json();
        self.clients.retain_mut(|ws| match ws.send(Message::Text(text.clone())) {
            Ok(()) => true,
            Err(e) if would_block(&e) => true,
            Err(e) => {
                debug!("removing client: {e}");
                false
            }
        });
    }

    fn poll_clients(&mut self) {
        let mut incoming = Vec::new();
        self.clients.retain_mut(|ws| {
            if let Err(e) = ws.flush() {
                if !would_block(&e) {
                    return false;
                }
            }
            loop {
                match ws.read() {
                    Ok(Message::Text(t)) => incoming.push(t),
                    Ok(Message::Close(_)) => return false,
                    Ok(_) => {}
                    Err(e) if would_block(&e) => return true,
                    Err(e) => {
                        debug!("removing client: {e}");
                        return false;
                    }
                }
            }
        });
        for text in incoming {
            self.handle(&text);
        }
    }

    fn handle(&mut self, text: &str) {
        let msg = match ClientMessage::parse(text) {
            Ok(m) => m,
            Err(e) => {
                warn!("{e}");
                return;
            }
        };
        if let ClientMessage::GameEvent { event, ts } = &msg {
            let _ = self.marker_tx.send(Marker::new(*ts, format!("game/{event}")));
            return;
        }
        match msg.apply(&self.config) {
            Ok(Some(cfg)) => {
                self.config = cfg.clone();
                let _ = self.cfg_tx.send(cfg);
                self.broadcast(&ServerMessage::config(&self.config));
            }
            Ok(None) => {}
            Err(e) => warn!("rejected client edit: {e}"),
        }
    }
}

impl WsHubHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Queue a message for every client; never waits.
    pub fn publish(&self, msg: ServerMessage) {
        self.outbox.send(msg);
    }

    /// Config edits made by clients, already validated.
    pub fn config_updates(&self) -> &Receiver<TransferConfig> {
        &self.config_updates
    }

    /// Game events from clients as `game/<event>` markers.
    pub fn markers(&self) -> &Receiver<Marker> {
        &self.markers
    }

    /// Tell the hub about a config change made elsewhere.
    pub fn sync_config(&self, cfg: TransferConfig) {
        let _ = self.sync.send(cfg.clone());
        self.publish(ServerMessage::config(&cfg));
    }

    pub fn dropped(&self) -> u64 {
        self.outbox.dropped()
    }

    pub fn shutdown(self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads {
            let _ = t.join();
        }
    }
}

/// Forward pipeline frames to the hub and client config edits to the
/// pipeline until the stream ends. `on_event` sees every pipeline event and
/// every client game marker.
pub fn broadcast_frames(
    mut pipeline: PipelineHandle,
    hub: &WsHubHandle,
    mut on_event: impl FnMut(&PipelineEvent),
) -> RuntimeResult<PipelineStats> {
    let events = pipeline.events().clone();
    loop {
        for cfg in hub.config_updates().try_iter() {
            pipeline.update_transfer(cfg)?;
        }
        for m in hub.markers().try_iter() {
            on_event(&PipelineEvent::Marker(m));
        }
        match events.recv_timeout(Duration::from_millis(20)) {
            Ok(ev) => {
                if let PipelineEvent::Frame { frame, .. } = &ev {
                    hub.publish(ServerMessage::Control(frame.clone()));
                }
                on_event(&ev);
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
    }
    pipeline.join()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::transfer::ControlFrame;
    use std::time::Instant;
    use tungstenite::stream::MaybeTlsStream;

    type Client = WebSocket<MaybeTlsStream<TcpStream>>;

    fn cfg() -> TransferConfig {
        TransferConfig::default_for(&["left".into(), "rest".into(), "right".into()])
    }

    fn connect(hub: &WsHubHandle) -> Client {
        let (ws, _) = tungstenite::connect(format!("ws://{}", hub.local_addr())).unwrap();
        if let MaybeTlsStream::Plain(s) = ws.get_ref() {
            s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        }
        ws
    }

    fn next_json(ws: &mut Client) -> serde_json::Value {
        loop {
            if let Message::Text(t) = ws.read().unwrap() {
                return serde_json::from_str(&t).unwrap();
            }
        }
    }

    fn frame(ts: f64) -> ControlFrame {
        ControlFrame {
            x: 0.0,
            y: 0.0,
            a: false,
            b: false,
            a_fill: 0.0,
            b_fill: 0.0,
            probs: vec![0.2, 0.6, 0.2],
            label: "rest".into(),
            ts,
        }
    }

    #[test]
    fn join_snapshot_then_frames() {
        let hub = WsHub::bind("127.0.0.1:0", cfg()).unwrap();
        let mut c = connect(&hub);
        assert_eq!(next_json(&mut c)["type"], "config");
        // publish until the client is registered and receives one
        let t = Instant::now();
        let mut got = None;
        while got.is_none() && t.elapsed() < Duration::from_secs(5) {
            hub.publish(ServerMessage::Control(frame(1.0)));
            let v = next_json(&mut c);
            if v["type"] == "control" {
                got = Some(v);
            }
        }
        assert_eq!(got.unwrap()["label"], "rest");
        hub.shutdown();
    }

    #[test]
    fn client_edits_and_game_events() {
        let hub = WsHub::bind("127.0.0.1:0", cfg()).unwrap();
        let mut c = connect(&hub);
        next_json(&mut c);
        c.send(Message::Text(r#"{"type":"set_threshold","class":"left","value":0.9}"#.into())).unwrap();
        let updated = hub.config_updates().recv_timeout(Duration::from_secs(5)).unwrap();
        assert_eq!(updated.thresholds["left"], 0.9);
        let snap = next_json(&mut c);
        assert_eq!(snap["type"], "config");
        assert_eq!(snap["thresholds"]["left"], 0.9);
        c.send(Message::Text(r#"{"type":"game_event","event":"qte_start","ts":4.25}"#.into())).unwrap();
        let m = hub.markers().recv_timeout(Duration::from_secs(5)).unwrap();
        assert_eq!(m, Marker::new(4.25, "game/qte_start"));
        // invalid edits are ignored
        c.send(Message::Text(r#"{"type":"set_threshold","class":"left","value":0.2}"#.into())).unwrap();
        assert!(hub.config_updates().recv_timeout(Duration::from_millis(300)).is_err());
        hub.shutdown();
    }

    #[test]
    fn disconnects_and_no_clients_do_not_block() {
        let hub = WsHub::bind("127.0.0.1:0", cfg()).unwrap();
        let t = Instant::now();
        for i in 0..10_000 {
            hub.publish(ServerMessage::Control(frame(i as f64)));
        }
        assert!(t.elapsed() < Duration::from_secs(2));
        let mut c = connect(&hub);
        next_json(&mut c);
        drop(c);
        for i in 0..1000 {
            hub.publish(ServerMessage::Control(frame(i as f64)));
        }
        let mut c2 = connect(&hub);
        assert_eq!(next_json(&mut c2)["type"], "config");
        hub.shutdown();
    }
}
