//! Websocket server: one session per connection, a reader thread feeding
//! a command mailbox and a control queue, and a 20 Hz stepper paced to
//! wall-clock time.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rial_core::sim2d::{TaskSpec, CONTROL_HZ};
use tungstenite::{Message as WsMessage, WebSocket};

use crate::error::{Result, TeleopError};
use crate::mailbox::Mailbox;
use crate::protocol::{decode, encode, Cmd, EpisodeCtl, ErrorFrame, Hello, Message, SeqCounter, SeqTracker, SessionInfo};
use crate::session::{validate_cmd, Session, SessionConfig};

const READ_POLL: Duration = Duration::from_millis(2);

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub task: TaskSpec,
    pub demo_dir: PathBuf,
    /// Shared secret expected in the client hello, if set.
    pub token: Option<String>,
    pub seed: u64,
}

pub struct Server {
    listener: TcpListener,
    cfg: ServerConfig,
    shutdown: Arc<AtomicBool>,
    next_id: AtomicU64,
}

/// Handle to a server running on a background thread.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.halt();
    }
}

pub fn bind<A: ToSocketAddrs>(addr: A, cfg: ServerConfig) -> Result<Server> {
    cfg.task.validate()?;
    Ok(Server {
        listener: TcpListener::bind(addr)?,
        cfg,
        shutdown: Arc::new(AtomicBool::new(false)),
        next_id: AtomicU64::new(1),
    })
}

impl Server {
    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts connections until shut down, one session thread each.
    pub fn run(&self) -> Result<()> {
        tracing::info!(addr = %self.local_addr()?, task = self.cfg.task.name(), "teleop server listening");
        let mut workers = Vec::new();
        for stream in self.listener.incoming() {
            if self.shutdown.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    tracing::warn!(error = %e, "accept failed");
                    continue;
                }
            };
            let id = self.next_id.fetch_add(1, Ordering::SeqCst);
            let cfg = self.cfg.clone();
            let shutdown = self.shutdown.clone();
            workers.push(std::thread::spawn(move || {
                if let Err(e) = handle_connection(stream, id, &cfg, &shutdown) {
                    tracing::warn!(session = id, error = %e, "session ended with an error");
                }
            }));
            workers.retain(|w| !w.is_finished());
        }
        for w in workers {
            let _ = w.join();
        }
        Ok(())
    }

    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let shutdown = self.shutdown.clone();
        let thread = std::thread::spawn(move || {
            if let Err(e) = self.run() {
                tracing::error!(error = %e, "teleop server stopped");
            }
        });
        Ok(ServerHandle {
            addr,
            shutdown,
            thread: Some(thread),
        })
    }
}

struct Conn {
    ws: WebSocket<TcpStream>,
    out: SeqCounter,
}

impl Conn {
    fn send(&mut self, body: Message) -> Result<()> {
        let env = self.out.wrap(body);
        self.ws.send(WsMessage::text(encode(&env)))?;
        Ok(())
    }

    fn send_error(&mut self, ref_seq: Option<u64>, e: &TeleopError) -> Result<()> {
        self.send(Message::Error(ErrorFrame {
            ref_seq,
            code: e.code().into(),
            message: e.to_string(),
        }))
    }
}

fn lock(c: &Mutex<Conn>) -> MutexGuard<'_, Conn> {
    c.lock().unwrap_or_else(|e| e.into_inner())
}

struct Shared {
    conn: Mutex<Conn>,
    mailbox: Mailbox<(u64, Cmd)>,
    greeted: AtomicBool,
    closed: AtomicBool,
}

fn handle_connection(stream: TcpStream, id: u64, cfg: &ServerConfig, shutdown: &AtomicBool) -> Result<()> {
    stream.set_nodelay(true)?;
    let ws = tungstenite::accept(stream.try_clone()?).map_err(|e| TeleopError::Malformed(format!("handshake: {e}")))?;
    stream.set_read_timeout(Some(READ_POLL))?;
    let mut session = Session::new(
        id,
        cfg.task.clone(),
        SessionConfig {
            demo_dir: cfg.demo_dir.clone(),
            seed: cfg.seed,
        },
    )?;
    let info = session.info();
    let shared = Arc::new(Shared {
        conn: Mutex::new(Conn {
            ws,
            out: SeqCounter::default(),
        }),
        mailbox: Mailbox::new(),
        greeted: AtomicBool::new(false),
        closed: AtomicBool::new(false),
    });
    let (ctl_tx, ctl_rx) = mpsc::channel();
    let (op_tx, op_rx) = mpsc::channel();
    let reader = {
        let shared = shared.clone();
        let token = cfg.token.clone();
        let task = cfg.task.clone();
        std::thread::spawn(move || read_loop(&shared, &info, token.as_deref(), &task, ctl_tx, op_tx))
    };
    tracing::info!(session = id, "operator connected");
    let r = step_loop(&shared, &mut session, &ctl_rx, &op_rx, shutdown);
    shared.closed.store(true, Ordering::SeqCst);
    session.disconnect();
    let _ = reader.join();
    tracing::info!(session = id, ticks = session.ticks(), "operator disconnected");
    r
}

fn read_loop(
    shared: &Shared,
    info: &SessionInfo,
    token: Option<&str>,
    task: &TaskSpec,
    ctl_tx: Sender<(u64, EpisodeCtl)>,
    op_tx: Sender<Option<String>>,
) {
    let mut seqs = SeqTracker::default();
    while !shared.closed.load(Ordering::SeqCst) {
        let mut c = lock(&shared.conn);
        let msg = match c.ws.read() {
            Ok(m) => m,
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                drop(c);
                std::thread::sleep(Duration::from_millis(1));
                continue;
            }
            Err(_) => break,
        };
        let text = match msg {
            WsMessage::Text(t) => t,
            WsMessage::Close(_) => break,
            WsMessage::Binary(_) => {
                let _ = c.send_error(None, &TeleopError::Malformed("binary frames are not part of the protocol".into()));
                continue;
            }
            _ => continue,
        };
        let env = match decode(text.as_str()) {
            Ok(e) => e,
            Err(e) => {
                let _ = c.send_error(None, &e);
                continue;
            }
        };
        if let Err(e) = seqs.accept(env.seq) {
            let _ = c.send_error(Some(env.seq), &e);
            continue;
        }
        let greeted = shared.greeted.load(Ordering::SeqCst);
        let outcome = match (env.body, greeted) {
            (Message::Hello(h), false) => {
                if token.is_some() && h.token.as_deref() != token {
                    Err(TeleopError::Token)
                } else {
                    let _ = op_tx.send(h.operator.clone());
                    shared.greeted.store(true, Ordering::SeqCst);
                    c.send(Message::Hello(Hello {
                        token: None,
                        operator: h.operator,
                        session: Some(info.clone()),
                    }))
                }
            }
            (m, false) => Err(TeleopError::NoHello(m.kind().into())),
            (Message::Cmd(cmd), true) => validate_cmd(task, &cmd).map(|_| {
                shared.mailbox.post((env.seq, cmd));
            }),
            (Message::EpisodeCtl(ctl), true) => {
                let _ = ctl_tx.send((env.seq, ctl));
                Ok(())
            }
            (m, true) => Err(TeleopError::Malformed(format!("unexpected `{}` from client", m.kind()))),
        };
        if let Err(e) = outcome {
            if matches!(e, TeleopError::Socket(_)) {
                break;
            }
            let _ = c.send_error(Some(env.seq), &e);
        }
    }
    shared.closed.store(true, Ordering::SeqCst);
}

fn step_loop(
    shared: &Shared,
    session: &mut Session,
    ctl_rx: &Receiver<(u64, EpisodeCtl)>,
    op_rx: &Receiver<Option<String>>,
    shutdown: &AtomicBool,
) -> Result<()> {
    let period = Duration::from_secs_f64(1.0 / CONTROL_HZ as f64);
    let mut next = Instant::now();
    while !shared.closed.load(Ordering::SeqCst) && !shutdown.load(Ordering::SeqCst) {
        while let Ok(op) = op_rx.try_recv() {
            session.set_operator(op);
        }
        while let Ok((seq, ctl)) = ctl_rx.try_recv() {
            let r = session.control(seq, &ctl);
            let mut c = lock(&shared.conn);
            match r {
                Ok(ack) => c.send(Message::Ack(ack))?,
                Err(e) => c.send_error(Some(seq), &e)?,
            }
        }
        if shared.greeted.load(Ordering::SeqCst) {
            session.tick(shared.mailbox.take())?;
            let obs = session.scene();
            let mut c = lock(&shared.conn);
            if let Err(e) = c.send(Message::Obs(Box::new(obs))) {
                tracing::debug!(error = %e, "obs frame not delivered");
                break;
            }
        }
        next += period;
        let now = Instant::now();
        if next > now {
            std::thread::sleep(next - now);
        } else if now - next > period * 4 {
            tracing::warn!("stepper fell behind wall-clock time, resynchronizing");
            next = now;
        }
    }
    Ok(())
}
