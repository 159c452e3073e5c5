//! Client and loopback server for the remote prior wire protocol.
//!
//! Every message is a 4-byte big-endian length followed by that many bytes
//! of UTF-8 JSON. Requests are `{op, request_id, payload}`; responses echo
//! `request_id` and carry either `result` or `error: {code, message}`.
//! Tensors travel as `{shape, dtype: "f32", data}` with `data` the base64 of
//! little-endian `f32` values in row-major order.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Conditioning, DiffusionPrior, Latent, NoiseSchedule, PriorInfo};
use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Frames above this size are rejected as malformed.
pub const MAX_FRAME_BYTES: u32 = 256 << 20;
/// Points in the advertised schedule table.
pub const SCHEDULE_POINTS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Handshake,
    Schedule,
    Encode,
    Decode,
    PredictNoise,
    DenoiseMultistep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub op: Op,
    pub request_id: u64,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub request_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub data: String,
}

impl Tensor {
    pub fn from_values(shape: Vec<usize>, values: &[f64]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for &v in values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Self {
            shape,
            dtype: "f32".into(),
            data: BASE64.encode(bytes),
        }
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        if self.dtype != "f32" {
            return Err(Error::Protocol(format!("unsupported tensor dtype {:?}", self.dtype)));
        }
        let bytes = BASE64
            .decode(&self.data)
            .map_err(|e| Error::Protocol(format!("tensor data is not base64: {e}")))?;
        let expected: usize = self.shape.iter().product();
        if bytes.len() != expected * 4 {
            return Err(Error::Protocol(format!(
                "tensor of shape {:?} carries {} bytes",
                self.shape,
                bytes.len()
            )));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    pub fn from_latent(h: &Latent) -> Self {
        Self::from_values(vec![h.channels, h.frames], &h.values)
    }

    pub fn to_latent(&self) -> Result<Latent> {
        match self.shape[..] {
            [c, f] => Latent::new(c, f, self.values()?),
            _ => Err(Error::Protocol(format!("latent tensor has shape {:?}", self.shape))),
        }
    }

    pub fn from_waveform(x: &Waveform) -> Self {
        Self::from_values(vec![2, x.len()], x.as_slice())
    }

    pub fn to_waveform(&self, sample_rate: u32) -> Result<Waveform> {
        match self.shape[..] {
            [2, _] => Waveform::from_channel_major(self.values()?, sample_rate),
            _ => Err(Error::Protocol(format!("audio tensor has shape {:?}", self.shape))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub latent_channels: usize,
    pub compression_factor: usize,
    pub sample_rate: u32,
    pub schedule_table: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReply {
    pub schedule_table: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioPayload {
    pub audio: Tensor,
    pub sample_rate: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPayload {
    pub latent: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePayload {
    pub latent: Tensor,
    pub t: f64,
    pub conditioning: Conditioning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReply {
    pub noise: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoisePayload {
    pub latent: Tensor,
    pub t: f64,
    pub conditioning: Conditioning,
    pub guidance_scale: f64,
    pub n_steps: usize,
}

pub fn write_frame(w: &mut impl Write, body: &[u8]) -> io::Result<()> {
    let len = u32::try_from(body.len())
        .ok()
        .filter(|&n| n <= MAX_FRAME_BYTES)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(body)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME_BYTES {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds the limit"),
        ));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn encode_request(req: &Request) -> Vec<u8> {
    serde_json::to_vec(req).expect("request serializes")
}

pub fn encode_response(resp: &Response) -> Vec<u8> {
    serde_json::to_vec(resp).expect("response serializes")
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("payload serializes")
}

fn from_value<T: DeserializeOwned>(v: Value, what: &str) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Protocol(format!("malformed {what}: {e}")))
}

fn transport(context: &str, e: io::Error) -> Error {
    Error::Transport(format!("{context}: {e}"))
}

/// Remote prior reached over the wire protocol. One connection; requests are
/// serialized on it and matched by `request_id`.
#[derive(Debug)]
pub struct BridgePrior {
    stream: Mutex<TcpStream>,
    next_id: AtomicU64,
    info: PriorInfo,
    schedule: NoiseSchedule,
}

impl BridgePrior {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self> {
        let addrs: Vec<SocketAddr> = addr
            .to_socket_addrs()
            .map_err(|e| transport("resolving bridge address", e))?
            .collect();
        let mut last = None;
        for a in addrs {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(stream) => {
                    stream
                        .set_read_timeout(Some(timeout))
                        .and_then(|_| stream.set_write_timeout(Some(timeout)))
                        .and_then(|_| stream.set_nodelay(true))
                        .map_err(|e| transport("configuring bridge socket", e))?;
                    return Self::handshake(stream);
                }
                Err(e) => last = Some(e),
            }
        }
        Err(match last {
            Some(e) => transport("connecting to bridge", e),
            None => Error::Transport("bridge address resolved to nothing".into()),
        })
    }

    fn handshake(stream: TcpStream) -> Result<Self> {
        let mut me = Self {
            stream: Mutex::new(stream),
            next_id: AtomicU64::new(1),
            info: PriorInfo {
                latent_channels: 0,
                compression_factor: 1,
                sample_rate: 0,
            },
            schedule: NoiseSchedule::Cosine,
        };
        let hs: Handshake = from_value(me.call(Op::Handshake, Value::Object(Default::default()))?, "handshake")?;
        if hs.latent_channels == 0 || hs.compression_factor == 0 || hs.sample_rate == 0 {
            return Err(Error::Protocol(format!("implausible handshake {hs:?}")));
        }
        me.info = PriorInfo {
            latent_channels: hs.latent_channels,
            compression_factor: hs.compression_factor,
            sample_rate: hs.sample_rate,
        };
        me.schedule = NoiseSchedule::from_table(hs.schedule_table)
            .map_err(|e| Error::Protocol(format!("handshake schedule: {e}")))?;
        Ok(me)
    }

    /// One request/response exchange.
    pub fn call(&self, op: Op, payload: Value) -> Result<Value> {
        let request_id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let body = encode_request(&Request {
            op,
            request_id,
            payload,
        });
        let mut stream = self.stream.lock().expect("bridge stream lock");
        write_frame(&mut *stream, &body).map_err(|e| transport("sending request", e))?;
        let reply = read_frame(&mut *stream)
            .map_err(|e| transport("reading response", e))?
            .ok_or_else(|| Error::Transport("bridge closed the connection".into()))?;
        drop(stream);
        let resp: Response = serde_json::from_slice(&reply)
            .map_err(|e| Error::Protocol(format!("malformed response envelope: {e}")))?;
        if resp.request_id != request_id {
            return Err(Error::Protocol(format!(
                "response id {} does not match request {request_id}",
                resp.request_id
            )));
        }
        match (resp.result, resp.error) {
            (_, Some(err)) => Err(Error::Remote {
                code: err.code,
                message: err.message,
            }),
            (Some(result), None) => Ok(result),
            (None, None) => Err(Error::Protocol("response has neither result nor error".into())),
        }
    }

    pub fn remote_schedule(&self) -> Result<NoiseSchedule> {
        let reply: ScheduleReply = from_value(self.call(Op::Schedule, Value::Object(Default::default()))?, "schedule")?;
        NoiseSchedule::from_table(reply.schedule_table)
    }
}

impl DiffusionPrior for BridgePrior {
    fn info(&self) -> PriorInfo {
        self.info
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn encode(&self, x: &Waveform) -> Result<Latent> {
        let payload = to_value(&AudioPayload {
            audio: Tensor::from_waveform(x),
            sample_rate: x.sample_rate(),
        });
        let reply: LatentPayload = from_value(self.call(Op::Encode, payload)?, "encode reply")?;
        reply.latent.to_latent()
    }

    fn decode(&self, h: &Latent) -> Result<Waveform> {
        let payload = to_value(&LatentPayload {
            latent: Tensor::from_latent(h),
        });
        let reply: AudioPayload = from_value(self.call(Op::Decode, payload)?, "decode reply")?;
        reply.audio.to_waveform(reply.sample_rate)
    }

    fn decode_vjp(&self, _h: &Latent, _cotangent: &Waveform) -> Result<Latent> {
        Err(Error::Capability(
            "the bridge protocol has no decoder vector-Jacobian product".into(),
        ))
    }

    fn predict_noise(&self, z: &Latent, t: f64, cond: &Conditioning) -> Result<Latent> {
        let payload = to_value(&NoisePayload {
            latent: Tensor::from_latent(z),
            t,
            conditioning: cond.clone(),
        });
        let reply: NoiseReply = from_value(self.call(Op::PredictNoise, payload)?, "noise reply")?;
        let eps = reply.noise.to_latent()?;
        z.check_shape(&eps, "bridge predict_noise")?;
        Ok(eps)
    }

    fn denoise_multistep(
        &self,
        z: &Latent,
        t: f64,
        cond: &Conditioning,
        guidance_scale: f64,
        n_steps: usize,
    ) -> Result<Latent> {
        let payload = to_value(&DenoisePayload {
            latent: Tensor::from_latent(z),
            t,
            conditioning: cond.clone(),
            guidance_scale,
            n_steps,
        });
        let reply: LatentPayload =
            from_value(self.call(Op::DenoiseMultistep, payload)?, "denoise reply")?;
        let h = reply.latent.to_latent()?;
        z.check_shape(&h, "bridge denoise_multistep")?;
        Ok(h)
    }
}

/// What the loopback server answers with.
#[derive(Clone)]
pub enum ServerBackend {
    /// Protocol identity: tensors come back unchanged.
    Echo { sample_rate: u32 },
    Prior(Arc<dyn DiffusionPrior>),
}

impl ServerBackend {
    fn handshake(&self) -> Handshake {
        match self {
            ServerBackend::Echo { sample_rate } => Handshake {
                latent_channels: 2,
                compression_factor: 1,
                sample_rate: *sample_rate,
                schedule_table: NoiseSchedule::Cosine.sample_table(SCHEDULE_POINTS),
            },
            ServerBackend::Prior(p) => {
                let info = p.info();
                Handshake {
                    latent_channels: info.latent_channels,
                    compression_factor: info.compression_factor,
                    sample_rate: info.sample_rate,
                    schedule_table: p.schedule().sample_table(SCHEDULE_POINTS),
                }
            }
        }
    }

    fn dispatch(&self, op: Op, payload: Value) -> Result<Value> {
        Ok(match op {
            Op::Handshake => to_value(&self.handshake()),
            Op::Schedule => to_value(&ScheduleReply {
                schedule_table: self.handshake().schedule_table,
            }),
            Op::Encode => {
                let p: AudioPayload = from_value(payload, "encode payload")?;
                let latent = match self {
                    ServerBackend::Echo { .. } => {
                        let x = p.audio.to_waveform(p.sample_rate)?;
                        Tensor::from_values(vec![2, x.len()], x.as_slice())
                    }
                    ServerBackend::Prior(prior) => {
                        Tensor::from_latent(&prior.encode(&p.audio.to_waveform(p.sample_rate)?)?)
                    }
                };
                to_value(&LatentPayload { latent })
            }
            Op::Decode => {
                let p: LatentPayload = from_value(payload, "decode payload")?;
                let h = p.latent.to_latent()?;
                let (audio, sample_rate) = match self {
                    ServerBackend::Echo { sample_rate } => (Tensor::from_latent(&h), *sample_rate),
                    ServerBackend::Prior(prior) => {
                        let x = prior.decode(&h)?;
                        (Tensor::from_waveform(&x), x.sample_rate())
                    }
                };
                to_value(&AudioPayload { audio, sample_rate })
            }
            Op::PredictNoise => {
                let p: NoisePayload = from_value(payload, "predict_noise payload")?;
                let z = p.latent.to_latent()?;
                let noise = match self {
                    ServerBackend::Echo { .. } => Tensor::from_latent(&z),
                    ServerBackend::Prior(prior) => {
                        Tensor::from_latent(&prior.predict_noise(&z, p.t, &p.conditioning)?)
                    }
                };
                to_value(&NoiseReply { noise })
            }
            Op::DenoiseMultistep => {
                let p: DenoisePayload = from_value(payload, "denoise_multistep payload")?;
                let z = p.latent.to_latent()?;
                let latent = match self {
                    ServerBackend::Echo { .. } => Tensor::from_latent(&z),
                    ServerBackend::Prior(prior) => Tensor::from_latent(&prior.denoise_multistep(
                        &z,
                        p.t,
                        &p.conditioning,
                        p.guidance_scale,
                        p.n_steps,
                    )?),
                };
                to_value(&LatentPayload { latent })
            }
        })
    }

    /// Response bytes for one request frame body.
    pub fn respond(&self, body: &[u8]) -> Vec<u8> {
        let resp = match serde_json::from_slice::<Request>(body) {
            Err(e) => Response {
                request_id: serde_json::from_slice::<Value>(body)
                    .ok()
                    .and_then(|v| v.get("request_id").and_then(Value::as_u64))
                    .unwrap_or(0),
                result: None,
                error: Some(ErrorBody {
                    code: "bad_request".into(),
                    message: e.to_string(),
                }),
            },
            Ok(req) => match self.dispatch(req.op, req.payload) {
                Ok(result) => Response {
                    request_id: req.request_id,
                    result: Some(result),
                    error: None,
                },
                Err(e) => Response {
                    request_id: req.request_id,
                    result: None,
                    error: Some(ErrorBody {
                        code: match e.root() {
                            Error::Protocol(_) => "bad_request",
                            Error::InvalidInput(_) => "invalid_input",
                            Error::Capability(_) => "unsupported",
                            _ => "backend_error",
                        }
                        .into(),
                        message: e.to_string(),
                    }),
                },
            },
        };
        encode_response(&resp)
    }

    /// Serves frames until the peer hangs up or sends a malformed frame.
    pub fn serve_stream(&self, r: &mut impl Read, w: &mut impl Write) -> io::Result<()> {
        while let Some(body) = read_frame(r)? {
            write_frame(w, &self.respond(&body))?;
        }
        Ok(())
    }
}

/// In-process TCP server on 127.0.0.1 speaking the bridge protocol; one
/// thread per connection. Stops accepting when dropped.
pub struct LoopbackServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl LoopbackServer {
    pub fn spawn(backend: ServerBackend) -> Result<Self> {
        let listener =
            TcpListener::bind("127.0.0.1:0").map_err(|e| transport("binding loopback server", e))?;
        let addr = listener
            .local_addr()
            .map_err(|e| transport("loopback address", e))?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let accept = thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let backend = backend.clone();
                thread::spawn(move || {
                    let mut reader = match stream.try_clone() {
                        Ok(r) => r,
                        Err(_) => return,
                    };
                    let mut writer = stream;
                    // malformed frames end the connection
                    let _ = backend.serve_stream(&mut reader, &mut writer);
                });
            }
        });
        Ok(Self {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn connect(&self) -> Result<BridgePrior> {
        BridgePrior::connect(self.addr, Duration::from_secs(120))
    }
}

impl Drop for LoopbackServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::OracleBackend;

    #[test]
    fn tensor_round_trip_is_exact_for_f32_values() {
        let values: Vec<f64> = (0..10).map(|i| (i as f32 * 0.37 - 1.1) as f64).collect();
        let t = Tensor::from_values(vec![2, 5], &values);
        assert_eq!(t.values().unwrap(), values);
        let bad = Tensor {
            shape: vec![2, 6],
            ..t.clone()
        };
        assert!(matches!(bad.values(), Err(Error::Protocol(_))));
    }

    #[test]
    fn echo_round_trip_is_bit_exact() {
        let server = LoopbackServer::spawn(ServerBackend::Echo { sample_rate: 16_000 }).unwrap();
        let client = server.connect().unwrap();
        assert_eq!(client.info().latent_channels, 2);
        let values: Vec<f64> = (0..12).map(|i| ((i as f32).sin() * 0.5) as f64).collect();
        let z = Latent::new(2, 6, values).unwrap();
        let eps = client.predict_noise(&z, 0.3, &Conditioning::prompt("a bell")).unwrap();
        assert_eq!(eps, z);
        assert!(matches!(
            client.decode_vjp(&z, &Waveform::zeros(6, 16_000).unwrap()),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn remote_errors_carry_codes() {
        let oracle = OracleBackend::tracking(100);
        let server = LoopbackServer::spawn(ServerBackend::Prior(Arc::new(oracle))).unwrap();
        let client = server.connect().unwrap();
        let z = Latent::zeros(2, 4);
        match client.predict_noise(&z, 0.5, &Conditioning::Null) {
            Err(Error::Remote { code, .. }) => assert_eq!(code, "backend_error"),
            other => panic!("expected a remote error, got {other:?}"),
        }
    }

    #[test]
    fn unreachable_bridge_is_a_transport_error() {
        let addr = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap()
        };
        assert!(matches!(
            BridgePrior::connect(addr, Duration::from_millis(500)),
            Err(Error::Transport(_))
        ));
    }

    #[test]
    fn malformed_frame_is_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(MAX_FRAME_BYTES + 1).to_be_bytes());
        assert!(read_frame(&mut bytes.as_slice()).is_err());
        let backend = ServerBackend::Echo { sample_rate: 8000 };
        let resp: Response =
            serde_json::from_slice(&backend.respond(br#"{"op":"fly","request_id":9,"payload":{}}"#)).unwrap();
        assert_eq!(resp.request_id, 9);
        assert_eq!(resp.error.unwrap().code, "bad_request");
    }
}
