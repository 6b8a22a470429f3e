use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use tokio::io::AsyncWriteExt;
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch, Notify};
use tokio::task::JoinHandle;

use super::codec::{
    encode_packet, ConnAck, Packet, PacketReader, Publish, SubAck, CONNACK_ACCEPTED, CONNACK_NOT_AUTHORIZED,
    CONNACK_SERVER_UNAVAILABLE, SUBACK_FAILURE,
};
use super::topic::{topic_matches, validate_filter};
use super::MqttError;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Subscription {
    pub client_id: String,
    pub filter: String,
}

fn matching_clients<'a>(topic: &str, subs: &'a [Subscription]) -> Vec<&'a str> {
    let mut seen = HashSet::new();
    subs.iter()
        .filter(|s| topic_matches(&s.filter, topic).unwrap_or(false))
        .filter(|s| seen.insert(s.client_id.as_str()))
        .map(|s| s.client_id.as_str())
        .collect()
}

/// One delivery per client holding at least one matching filter, in the
/// order of each client's first matching subscription.
pub fn broker_dispatch(publish: &Publish, subs: &[Subscription]) -> Vec<(String, Publish)> {
    matching_clients(&publish.topic, subs)
        .into_iter()
        .map(|c| (c.to_string(), publish.clone()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct BrokerLimits {
    pub max_packet: usize,
    pub max_clients: usize,
    pub max_subscriptions_per_client: usize,
    pub connect_timeout: Duration,
    /// Outbound messages buffered per client before QoS 0 drops kick in.
    pub outbound_queue: usize,
    /// CONNECT usernames let in; empty admits everyone.
    pub accepted_tokens: Vec<String>,
}

impl Default for BrokerLimits {
    fn default() -> Self {
        BrokerLimits {
            max_packet: 64 * 1024,
            max_clients: 128,
            max_subscriptions_per_client: 64,
            connect_timeout: Duration::from_secs(10),
            outbound_queue: 16_384,
            accepted_tokens: Vec::new(),
        }
    }
}

#[derive(Debug, Default)]
pub struct BrokerStats {
    pub connections: AtomicU64,
    pub rejected: AtomicU64,
    pub protocol_errors: AtomicU64,
    pub published: AtomicU64,
    pub delivered: AtomicU64,
    pub dropped: AtomicU64,
}

impl BrokerStats {
    fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }
}

type Outbound = Arc<[u8]>;

struct ClientSlot {
    conn_id: u64,
    tx: mpsc::Sender<Outbound>,
    kick: Arc<Notify>,
}

#[derive(Default)]
struct Registry {
    clients: HashMap<String, ClientSlot>,
    subs: Vec<Subscription>,
}

struct Shared {
    registry: RwLock<Registry>,
    limits: BrokerLimits,
    stats: Arc<BrokerStats>,
    next_conn: AtomicU64,
}

/// A bound, not yet running broker.
pub struct Broker {
    listener: TcpListener,
    shared: Arc<Shared>,
}

impl Broker {
    pub async fn bind(addr: &str, limits: BrokerLimits) -> Result<Self, MqttError> {
        let listener = TcpListener::bind(addr).await?;
        Ok(Broker {
            listener,
            shared: Arc::new(Shared {
                registry: RwLock::new(Registry::default()),
                limits,
                stats: Arc::new(BrokerStats::default()),
                next_conn: AtomicU64::new(1),
            }),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    pub fn spawn(self) -> BrokerHandle {
        let addr = self.local_addr();
        let stats = self.shared.stats.clone();
        let (stop_tx, stop_rx) = watch::channel(false);
        let task = tokio::spawn(self.run(stop_rx));
        BrokerHandle {
            addr,
            stats,
            stop_tx,
            task,
        }
    }

    /// Accepts clients until `shutdown` flips to true.
    pub async fn run(self, mut shutdown: watch::Receiver<bool>) {
        let mut conns = Vec::new();
        loop {
            tokio::select! {
                accepted = self.listener.accept() => match accepted {
                    Ok((stream, _)) => {
                        BrokerStats::bump(&self.shared.stats.connections);
                        conns.push(tokio::spawn(serve_connection(
                            self.shared.clone(),
                            stream,
                            shutdown.clone(),
                        )));
                        conns.retain(|h: &JoinHandle<()>| !h.is_finished());
                    }
                    Err(e) => {
                        tracing::warn!("accept failed: {e}");
                        tokio::time::sleep(Duration::from_millis(50)).await;
                    }
                },
                _ = shutdown.changed() => break,
            }
        }
        for c in conns {
            let _ = c.await;
        }
    }
}

pub struct BrokerHandle {
    addr: SocketAddr,
    stats: Arc<BrokerStats>,
    stop_tx: watch::Sender<bool>,
    task: JoinHandle<()>,
}

impl BrokerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> &BrokerStats {
        &self.stats
    }

    /// Stops accepting, closes every client and waits for the tasks.
    pub async fn shutdown(self) {
        let _ = self.stop_tx.send(true);
        let _ = self.task.await;
    }
}

async fn write_now(stream: &mut OwnedWriteHalf, packet: &Packet) {
    if let Ok(bytes) = encode_packet(packet) {
        let _ = stream.write_all(&bytes).await;
    }
}

async fn serve_connection(shared: Arc<Shared>, stream: TcpStream, mut shutdown: watch::Receiver<bool>) {
    let _ = stream.set_nodelay(true);
    let limits = &shared.limits;
    let stats = &shared.stats;
    let (rd, mut wr) = stream.into_split();
    let mut reader = PacketReader::new(rd, limits.max_packet);

    let first = tokio::time::timeout(limits.connect_timeout, reader.next()).await;
    let connect = match first {
        Ok(Ok(Some(Packet::Connect(c)))) => c,
        Ok(Ok(None)) | Err(_) => return,
        Ok(Ok(Some(_))) | Ok(Err(_)) => {
            BrokerStats::bump(&stats.protocol_errors);
            return;
        }
    };

    let authorized = limits.accepted_tokens.is_empty()
        || connect
            .username
            .as_ref()
            .is_some_and(|u| limits.accepted_tokens.contains(u));
    if !authorized {
        BrokerStats::bump(&stats.rejected);
        write_now(
            &mut wr,
            &Packet::ConnAck(ConnAck {
                session_present: false,
                return_code: CONNACK_NOT_AUTHORIZED,
            }),
        )
        .await;
        return;
    }

    let conn_id = shared.next_conn.fetch_add(1, Ordering::Relaxed);
    let client_id = if connect.client_id.is_empty() {
        format!("anon-{conn_id}")
    } else {
        connect.client_id.clone()
    };
    let (tx, mut rx) = mpsc::channel::<Outbound>(limits.outbound_queue);
    let kick = Arc::new(Notify::new());
    let admitted = {
        let mut reg = shared.registry.write().expect("registry lock");
        let replacing = reg.clients.contains_key(&client_id);
        if !replacing && reg.clients.len() >= limits.max_clients {
            false
        } else {
            let slot = ClientSlot {
                conn_id,
                tx: tx.clone(),
                kick: kick.clone(),
            };
            if let Some(old) = reg.clients.insert(client_id.clone(), slot) {
                // Same client id: the newest connection wins.
                old.kick.notify_one();
                reg.subs.retain(|s| s.client_id != client_id);
            }
            true
        }
    };
    if !admitted {
        BrokerStats::bump(&stats.rejected);
        write_now(
            &mut wr,
            &Packet::ConnAck(ConnAck {
                session_present: false,
                return_code: CONNACK_SERVER_UNAVAILABLE,
            }),
        )
        .await;
        return;
    }

    let connack = Packet::ConnAck(ConnAck {
        session_present: false,
        return_code: CONNACK_ACCEPTED,
    });
    if let Ok(bytes) = encode_packet(&connack) {
        let _ = tx.try_send(bytes.into());
    }

    let writer = tokio::spawn(async move {
        while let Some(buf) = rx.recv().await {
            if wr.write_all(&buf).await.is_err() {
                break;
            }
        }
        let _ = wr.shutdown().await;
    });

    let idle_limit = (connect.keep_alive_s > 0).then(|| Duration::from_millis(u64::from(connect.keep_alive_s) * 1500));
    loop {
        let next = async {
            match idle_limit {
                Some(d) => tokio::time::timeout(d, reader.next())
                    .await
                    .unwrap_or(Err(MqttError::Timeout)),
                None => reader.next().await,
            }
        };
        let packet = tokio::select! {
            p = next => p,
            _ = kick.notified() => break,
            _ = shutdown.changed() => break,
        };
        let packet = match packet {
            Ok(Some(p)) => p,
            Ok(None) | Err(MqttError::Timeout) => break,
            Err(e) => {
                tracing::debug!(client = %client_id, "closing connection: {e}");
                BrokerStats::bump(&stats.protocol_errors);
                break;
            }
        };
        match packet {
            Packet::Publish(p) => publish(&shared, p),
            Packet::Subscribe(s) => {
                let return_codes = subscribe(&shared, &client_id, &s.filters);
                let ack = Packet::SubAck(SubAck {
                    packet_id: s.packet_id,
                    return_codes,
                });
                if let Ok(bytes) = encode_packet(&ack) {
                    let _ = tx.send(bytes.into()).await;
                }
            }
            Packet::PingReq => {
                if let Ok(bytes) = encode_packet(&Packet::PingResp) {
                    let _ = tx.send(bytes.into()).await;
                }
            }
            Packet::Disconnect => break,
            Packet::Connect(_) | Packet::ConnAck(_) | Packet::SubAck(_) | Packet::PingResp => {
                BrokerStats::bump(&stats.protocol_errors);
                break;
            }
        }
    }

    {
        let mut reg = shared.registry.write().expect("registry lock");
        if reg.clients.get(&client_id).map(|s| s.conn_id) == Some(conn_id) {
            reg.clients.remove(&client_id);
            reg.subs.retain(|s| s.client_id != client_id);
        }
    }
    drop(tx);
    let _ = tokio::time::timeout(Duration::from_secs(1), writer).await;
}

fn subscribe(shared: &Shared, client_id: &str, filters: &[String]) -> Vec<u8> {
    let mut reg = shared.registry.write().expect("registry lock");
    let mut codes = Vec::with_capacity(filters.len());
    for f in filters {
        let exists = reg.subs.iter().any(|s| s.client_id == client_id && &s.filter == f);
        let count = reg.subs.iter().filter(|s| s.client_id == client_id).count();
        if validate_filter(f).is_err() {
            codes.push(SUBACK_FAILURE);
        } else if exists {
            codes.push(0);
        } else if count >= shared.limits.max_subscriptions_per_client {
            codes.push(SUBACK_FAILURE);
        } else {
            reg.subs.push(Subscription {
                client_id: client_id.to_string(),
                filter: f.clone(),
            });
            codes.push(0);
        }
    }
    codes
}

fn publish(shared: &Shared, p: Publish) {
    let stats = &shared.stats;
    BrokerStats::bump(&stats.published);
    let targets: Vec<mpsc::Sender<Outbound>> = {
        let reg = shared.registry.read().expect("registry lock");
        matching_clients(&p.topic, &reg.subs)
            .into_iter()
            .filter_map(|c| reg.clients.get(c).map(|slot| slot.tx.clone()))
            .collect()
    };
    if targets.is_empty() {
        return;
    }
    let Ok(bytes) = encode_packet(&Packet::Publish(p)) else {
        return;
    };
    let bytes: Outbound = bytes.into();
    for tx in targets {
        match tx.try_send(bytes.clone()) {
            Ok(()) => BrokerStats::bump(&stats.delivered),
            Err(mpsc::error::TrySendError::Full(_)) => BrokerStats::bump(&stats.dropped),
            Err(mpsc::error::TrySendError::Closed(_)) => {}
        }
    }
}
