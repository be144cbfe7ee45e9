use std::io::{self, Read};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use super::frame::frame_decode;
use super::{read_prefix, write_message, GraspResponse, Status};
use crate::codec::{CodecError, CodecModel};
use crate::grasp::{CandidateRecord, DetectorModel};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("codec reconstructs {codec:?} images but the detector takes {detector:?}")]
    Incompatible { codec: [usize; 3], detector: [usize; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerConfig {
    /// Declared frame lengths above this are refused before reading.
    pub max_frame_bytes: usize,
    /// Read and write timeout on each connection.
    pub io_timeout: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            max_frame_bytes: 16 << 20,
            io_timeout: Duration::from_secs(10),
        }
    }
}

/// The cloud half: a codec (only its decoder runs) and a detector.
#[derive(Debug)]
pub struct CloudModels {
    codec: CodecModel,
    detector: DetectorModel,
    model_id: u64,
}

impl CloudModels {
    pub fn new(codec: CodecModel, detector: DetectorModel) -> Result<Self, ServerError> {
        if codec.config.input_shape != detector.config.input_shape {
            return Err(ServerError::Incompatible {
                codec: codec.config.input_shape,
                detector: detector.config.input_shape,
            });
        }
        let model_id = codec.model_id();
        Ok(Self {
            codec,
            detector,
            model_id,
        })
    }

    pub fn model_id(&self) -> u64 {
        self.model_id
    }

    /// Full handling of one frame, as the server does it.
    pub fn respond(&self, frame: &[u8]) -> GraspResponse {
        let latent = match frame_decode(frame) {
            Ok(l) => l,
            Err(e) => return GraspResponse::failure(Status::BadFrame, e.to_string()),
        };
        if latent.model_id != self.model_id {
            return GraspResponse::failure(
                Status::UnknownModel,
                format!("frame model {:016x}, loaded decoder {:016x}", latent.model_id, self.model_id),
            );
        }
        let t0 = Instant::now();
        let image = match self.codec.decode(&latent) {
            Ok(img) => img,
            Err(e @ CodecError::LatentShape { .. }) => return GraspResponse::failure(Status::InvalidLatent, e.to_string()),
            Err(e) => return GraspResponse::failure(Status::InternalError, e.to_string()),
        };
        let decode_ms = t0.elapsed().as_secs_f64() * 1e3;
        let t1 = Instant::now();
        let candidates = match self.detector.detect(&image) {
            Ok(c) => c,
            Err(e) => return GraspResponse::failure(Status::InternalError, e.to_string()),
        };
        GraspResponse {
            status: Status::Ok,
            candidates: candidates.iter().map(CandidateRecord::from).collect(),
            decode_ms,
            detect_ms: t1.elapsed().as_secs_f64() * 1e3,
            message: None,
        }
    }
}

pub struct Server {
    listener: TcpListener,
    models: Arc<CloudModels>,
    config: ServerConfig,
}

impl Server {
    pub fn bind<A: ToSocketAddrs>(addr: A, models: CloudModels, config: ServerConfig) -> Result<Self, ServerError> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            models: Arc::new(models),
            config,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Serves until the process exits.
    pub fn run(self) -> Result<(), ServerError> {
        self.accept_loop(&AtomicBool::new(false));
        Ok(())
    }

    /// Serves on a background thread until [`ServerHandle::shutdown`].
    pub fn spawn(self) -> Result<ServerHandle, ServerError> {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let thread = thread::spawn(move || self.accept_loop(&flag));
        Ok(ServerHandle {
            addr,
            stop,
            thread: Some(thread),
        })
    }

    fn accept_loop(&self, stop: &AtomicBool) {
        for conn in self.listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let models = Arc::clone(&self.models);
                    let config = self.config;
                    thread::spawn(move || {
                        let peer = stream.peer_addr().ok();
                        if let Err(e) = serve_session(stream, &models, &config) {
                            log::debug!("session {peer:?} ended: {e}");
                        }
                    });
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    }
}

fn serve_session(mut stream: TcpStream, models: &CloudModels, config: &ServerConfig) -> io::Result<()> {
    stream.set_read_timeout(Some(config.io_timeout))?;
    stream.set_write_timeout(Some(config.io_timeout))?;
    stream.set_nodelay(true)?;
    while let Some(len) = read_prefix(&mut stream)? {
        if len > config.max_frame_bytes {
            let msg = format!("declared frame of {len} bytes exceeds the {} byte limit", config.max_frame_bytes);
            return reply(&mut stream, &GraspResponse::failure(Status::FrameTooLarge, msg));
        }
        let mut frame = vec![0u8; len];
        if let Err(e) = stream.read_exact(&mut frame) {
            // Best effort: the peer may already be gone.
            let _ = reply(&mut stream, &GraspResponse::failure(Status::BadFrame, format!("incomplete frame: {e}")));
            return Err(e);
        }
        let response = models.respond(&frame);
        reply(&mut stream, &response)?;
        if response.status != Status::Ok {
            return Ok(());
        }
    }
    Ok(())
}

fn reply(stream: &mut TcpStream, response: &GraspResponse) -> io::Result<()> {
    let body = serde_json::to_vec(response).map_err(io::Error::other)?;
    write_message(stream, &body)
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    /// Loopback-reachable address of the listener.
    pub fn addr(&self) -> SocketAddr {
        let mut a = self.addr;
        match a.ip() {
            IpAddr::V4(ip) if ip.is_unspecified() => a.set_ip(Ipv4Addr::LOCALHOST.into()),
            IpAddr::V6(ip) if ip.is_unspecified() => a.set_ip(Ipv6Addr::LOCALHOST.into()),
            _ => {}
        }
        a
    }

    /// Stops accepting and waits for the accept loop. Open sessions finish
    /// on their own.
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        if let Some(t) = self.thread.take() {
            self.stop.store(true, Ordering::SeqCst);
            // Wake the blocking accept.
            let _ = TcpStream::connect_timeout(&self.addr(), Duration::from_secs(1));
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}
