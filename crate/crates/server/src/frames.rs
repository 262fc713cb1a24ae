//! Async TCP listener speaking the frame protocol. Each connection is
//! served in order: one reply frame per request frame. Store operations
//! may block (AWAIT), so they run on the blocking pool.

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;

use eduction_core::transport::frame::{self, HEADER_LEN};
use eduction_core::transport::{Frame, Reply, Service};
use tokio::io::{AsyncReadExt, AsyncWriteExt, BufReader, BufWriter};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;

pub async fn serve(listener: TcpListener, service: Arc<Service>, mut stop: watch::Receiver<bool>) {
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((sock, peer)) => {
                    let service = Arc::clone(&service);
                    let stop = stop.clone();
                    tokio::spawn(async move {
                        if let Err(e) = connection(sock, service, stop).await {
                            tracing::debug!(%peer, error = %e, "connection closed with error");
                        }
                    });
                }
                Err(e) => tracing::warn!(error = %e, "accept failed"),
            },
            _ = stop.changed() => return,
        }
    }
}

async fn connection(sock: TcpStream, service: Arc<Service>, mut stop: watch::Receiver<bool>) -> io::Result<()> {
    sock.set_nodelay(true)?;
    let (rd, wr) = sock.into_split();
    let (mut rd, mut wr) = (BufReader::new(rd), BufWriter::new(wr));
    loop {
        let mut header = [0u8; HEADER_LEN];
        tokio::select! {
            r = rd.read_exact(&mut header) => match r {
                Ok(_) => {}
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
                Err(e) => return Err(e),
            },
            _ = stop.changed() => return Ok(()),
        }
        let (msg, len) = match frame::parse_header(&header) {
            Ok(h) => h,
            Err(e) => {
                // the stream can no longer be trusted: answer once, then hang up
                let (msg, payload) = Reply::error("ProtocolError", e.to_string()).encode();
                wr.write_all(&frame::encode_frame(msg, &payload)).await?;
                wr.flush().await?;
                return Ok(());
            }
        };
        let mut payload = vec![0u8; len];
        rd.read_exact(&mut payload).await?;
        let service = Arc::clone(&service);
        let reply = tokio::task::spawn_blocking(move || service.handle(&Frame::new(msg, payload)))
            .await
            .map_err(io::Error::other)?;
        wr.write_all(&reply.encode()).await?;
        wr.flush().await?;
    }
}

/// A frame server running on its own runtime threads.
pub struct FrameServer {
    addr: SocketAddr,
    stop: watch::Sender<bool>,
    runtime: Option<tokio::runtime::Runtime>,
}

impl FrameServer {
    /// Binds `addr` (port 0 picks a free port) and starts serving.
    pub fn start(addr: &str, service: Arc<Service>) -> io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .thread_name("frame-server")
            .enable_all()
            .build()?;
        let listener = runtime.block_on(TcpListener::bind(addr))?;
        let local = listener.local_addr()?;
        let (stop, rx) = watch::channel(false);
        runtime.spawn(serve(listener, service, rx));
        tracing::info!(addr = %local, "frame server listening");
        Ok(Self { addr: local, stop, runtime: Some(runtime) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        let _ = self.stop.send(true);
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}

impl Drop for FrameServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}
