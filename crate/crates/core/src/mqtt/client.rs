use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Duration;

use tokio::io::AsyncWriteExt;
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::TcpStream;
use tokio::sync::{mpsc, Mutex};
use tokio::task::JoinHandle;

use super::codec::{encode_packet, Connect, Packet, PacketReader, Publish, Subscribe, CONNACK_ACCEPTED};
use super::MqttError;

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub addr: String,
    pub client_id: String,
    pub keep_alive_s: u16,
    /// Sent in the CONNECT username field.
    pub username: Option<String>,
    pub connect_timeout: Duration,
    pub max_packet: usize,
}

impl ClientOptions {
    pub fn new(addr: impl Into<String>, client_id: impl Into<String>) -> Self {
        ClientOptions {
            addr: addr.into(),
            client_id: client_id.into(),
            keep_alive_s: 30,
            username: None,
            connect_timeout: Duration::from_secs(5),
            max_packet: 64 * 1024,
        }
    }
}

/// Cloneable write side of a connection.
#[derive(Clone)]
pub struct Publisher {
    writer: Arc<Mutex<OwnedWriteHalf>>,
}

impl Publisher {
    async fn send(&self, packet: &Packet) -> Result<(), MqttError> {
        let bytes = encode_packet(packet)?;
        let mut w = self.writer.lock().await;
        w.write_all(&bytes).await?;
        Ok(())
    }

    pub async fn publish(&self, topic: &str, payload: impl Into<Vec<u8>>) -> Result<(), MqttError> {
        self.send(&Packet::Publish(Publish {
            topic: topic.to_string(),
            payload: payload.into(),
        }))
        .await
    }
}

/// Single-connection MQTT client.
pub struct MqttClient {
    publisher: Publisher,
    incoming: mpsc::Receiver<Result<Packet, MqttError>>,
    pending: VecDeque<Publish>,
    next_packet_id: u16,
    reader: JoinHandle<()>,
    pinger: Option<JoinHandle<()>>,
}

impl MqttClient {
    pub async fn connect(opts: &ClientOptions) -> Result<Self, MqttError> {
        let attempt = async {
            let stream = TcpStream::connect(&opts.addr).await?;
            let _ = stream.set_nodelay(true);
            let (rd, wr) = stream.into_split();
            let publisher = Publisher {
                writer: Arc::new(Mutex::new(wr)),
            };
            publisher
                .send(&Packet::Connect(Connect {
                    client_id: opts.client_id.clone(),
                    keep_alive_s: opts.keep_alive_s,
                    clean_session: true,
                    username: opts.username.clone(),
                    password: None,
                }))
                .await?;
            let mut reader = PacketReader::new(rd, opts.max_packet);
            match reader.next().await? {
                Some(Packet::ConnAck(a)) if a.return_code == CONNACK_ACCEPTED => {}
                Some(Packet::ConnAck(a)) => return Err(MqttError::ConnectionRefused(a.return_code)),
                Some(_) => return Err(MqttError::MalformedPacket("expected CONNACK")),
                None => return Err(MqttError::Closed),
            }
            Ok((publisher, reader))
        };
        let (publisher, mut reader) = tokio::time::timeout(opts.connect_timeout, attempt)
            .await
            .map_err(|_| MqttError::Timeout)??;

        let (tx, incoming) = mpsc::channel(4096);
        let reader = tokio::spawn(async move {
            loop {
                match reader.next().await {
                    Ok(Some(p)) => {
                        if tx.send(Ok(p)).await.is_err() {
                            break;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        let _ = tx.send(Err(e)).await;
                        break;
                    }
                }
            }
        });
        let pinger = (opts.keep_alive_s > 0).then(|| {
            let p = publisher.clone();
            let period = Duration::from_millis(u64::from(opts.keep_alive_s) * 500);
            tokio::spawn(async move {
                loop {
                    tokio::time::sleep(period).await;
                    if p.send(&Packet::PingReq).await.is_err() {
                        break;
                    }
                }
            })
        });
        Ok(MqttClient {
            publisher,
            incoming,
            pending: VecDeque::new(),
            next_packet_id: 1,
            reader,
            pinger,
        })
    }

    pub fn publisher(&self) -> Publisher {
        self.publisher.clone()
    }

    pub async fn publish(&self, topic: &str, payload: impl Into<Vec<u8>>) -> Result<(), MqttError> {
        self.publisher.publish(topic, payload).await
    }

    /// Subscribes and waits for the SUBACK. Returns the granted codes.
    pub async fn subscribe(&mut self, filters: &[&str]) -> Result<Vec<u8>, MqttError> {
        let packet_id = self.next_packet_id;
        self.next_packet_id = self.next_packet_id.checked_add(1).unwrap_or(1);
        self.publisher
            .send(&Packet::Subscribe(Subscribe {
                packet_id,
                filters: filters.iter().map(|f| f.to_string()).collect(),
            }))
            .await?;
        loop {
            match self.incoming.recv().await {
                Some(Ok(Packet::SubAck(a))) if a.packet_id == packet_id => return Ok(a.return_codes),
                Some(Ok(Packet::Publish(p))) => self.pending.push_back(p),
                Some(Ok(_)) => {}
                Some(Err(e)) => return Err(e),
                None => return Err(MqttError::Closed),
            }
        }
    }

    /// Next application message; `None` once the connection is gone.
    pub async fn recv(&mut self) -> Option<Publish> {
        if let Some(p) = self.pending.pop_front() {
            return Some(p);
        }
        loop {
            match self.incoming.recv().await? {
                Ok(Packet::Publish(p)) => return Some(p),
                Ok(_) => {}
                Err(e) => {
                    tracing::debug!("mqtt connection error: {e}");
                    return None;
                }
            }
        }
    }

    pub async fn disconnect(self) {
        let _ = self.publisher.send(&Packet::Disconnect).await;
        let _ = self.publisher.writer.lock().await.shutdown().await;
    }
}

impl Drop for MqttClient {
    fn drop(&mut self) {
        self.reader.abort();
        if let Some(p) = &self.pinger {
            p.abort();
        }
    }
}
