//! Client side of the wire protocol over a child process or a TCP connection.

use std::io::{BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use super::protocol::{
    decode_reply, encode_request, peek_id, read_frame, write_frame, ProtocolError, Reply, Request,
    MAX_LINE_BYTES,
};
use super::{EnvDescription, EnvError, Environment, RolloutRecord, RolloutRequest};

/// An executor reached through newline-delimited JSON.
///
/// A background thread reads reply lines so every call can be bounded by a
/// timeout. Replies whose `id` does not match the outstanding request (late
/// answers to a timed-out call) are dropped.
pub struct WireEnvironment {
    label: String,
    writer: Box<dyn Write + Send>,
    replies: Receiver<Result<String, ProtocolError>>,
    next_id: u64,
    timeout: Duration,
    child: Option<Child>,
    socket: Option<TcpStream>,
}

impl std::fmt::Debug for WireEnvironment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WireEnvironment")
            .field("label", &self.label)
            .field("next_id", &self.next_id)
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl WireEnvironment {
    pub fn from_streams<R, W>(label: impl Into<String>, reader: R, writer: W, timeout: Duration) -> Self
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            loop {
                match read_frame(&mut reader, MAX_LINE_BYTES) {
                    Ok(Some(line)) => {
                        if tx.send(Ok(line)).is_err() {
                            return;
                        }
                    }
                    Ok(None) => {
                        let _ = tx.send(Err(ProtocolError::Closed));
                        return;
                    }
                    Err(err @ ProtocolError::Io(_)) => {
                        let _ = tx.send(Err(err));
                        return;
                    }
                    Err(err) => {
                        if tx.send(Err(err)).is_err() {
                            return;
                        }
                    }
                }
            }
        });
        Self {
            label: label.into(),
            writer: Box::new(writer),
            replies: rx,
            next_id: 1,
            timeout,
            child: None,
            socket: None,
        }
    }

    /// Spawns `command` through `sh -c` and talks to it over stdin/stdout.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, EnvError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| EnvError::Transport(format!("cannot start `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        let mut env = Self::from_streams(format!("cmd:{command}"), stdout, stdin, timeout);
        env.child = Some(child);
        Ok(env)
    }

    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, EnvError> {
        let stream =
            TcpStream::connect(addr).map_err(|e| EnvError::Transport(format!("cannot connect to {addr}: {e}")))?;
        let reader = stream
            .try_clone()
            .map_err(|e| EnvError::Transport(format!("cannot clone socket for {addr}: {e}")))?;
        let socket = stream.try_clone().ok();
        let mut env = Self::from_streams(format!("tcp:{addr}"), reader, stream, timeout);
        env.socket = socket;
        Ok(env)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    fn allocate_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Sends `request` and waits for the reply with the same id.
    pub fn call(&mut self, request: &Request) -> Result<Reply, EnvError> {
        let id = request.id();
        write_frame(&mut self.writer, &encode_request(request))
            .map_err(|e| EnvError::Transport(format!("{}: write failed: {e}", self.label)))?;
        let deadline = Instant::now() + self.timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            let line = match self.replies.recv_timeout(remaining) {
                Ok(Ok(line)) => line,
                Ok(Err(ProtocolError::Closed)) | Err(RecvTimeoutError::Disconnected) => {
                    return Err(EnvError::Transport(format!("{}: executor closed the connection", self.label)))
                }
                Ok(Err(ProtocolError::Io(message))) => {
                    return Err(EnvError::Transport(format!("{}: {message}", self.label)))
                }
                Ok(Err(err)) => return Err(EnvError::Protocol(err)),
                Err(RecvTimeoutError::Timeout) => return Err(EnvError::Timeout(self.timeout)),
            };
            match peek_id(&line) {
                Some(reply_id) if reply_id == id => {}
                Some(stale) => {
                    tracing::debug!(expected = id, got = stale, "dropping reply for another request");
                    continue;
                }
                None => {
                    return Err(EnvError::Protocol(ProtocolError::Invalid(format!(
                        "reply without a numeric id: {}",
                        truncate(&line)
                    ))))
                }
            }
            return match decode_reply(&line, request.reply_kind())? {
                Reply::Error(e) => Err(EnvError::Rejected(e.error)),
                reply => Ok(reply),
            };
        }
    }

    fn wait_for_exit(&mut self, grace: Duration) {
        let Some(child) = self.child.as_mut() else { return };
        let deadline = Instant::now() + grace;
        while Instant::now() < deadline {
            if let Ok(Some(_)) = child.try_wait() {
                self.child = None;
                return;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        let _ = child.kill();
        let _ = child.wait();
        self.child = None;
    }
}

fn truncate(line: &str) -> &str {
    match line.char_indices().nth(200) {
        Some((i, _)) => &line[..i],
        None => line,
    }
}

fn unexpected(reply: Reply) -> EnvError {
    EnvError::Protocol(ProtocolError::Invalid(format!("unexpected reply {reply:?}")))
}

impl Environment for WireEnvironment {
    fn describe(&mut self) -> Result<EnvDescription, EnvError> {
        let id = self.allocate_id();
        match self.call(&Request::Describe { id })? {
            Reply::Describe(d) => Ok(EnvDescription {
                name: d.name,
                protocol_version: d.protocol_version,
                tasks: d.tasks,
            }),
            other => Err(unexpected(other)),
        }
    }

    fn reset(&mut self) -> Result<(), EnvError> {
        let id = self.allocate_id();
        match self.call(&Request::Reset { id })? {
            Reply::Ack(_) => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    fn rollout(&mut self, request: &RolloutRequest) -> Result<RolloutRecord, EnvError> {
        let id = self.allocate_id();
        let record = match self.call(&Request::rollout(id, request))? {
            Reply::Rollout(r) => r.into_record()?,
            other => return Err(unexpected(other)),
        };
        record
            .validate(request.skill.len())
            .map_err(|e| EnvError::Protocol(ProtocolError::Invalid(e)))?;
        Ok(record)
    }

    fn shutdown(&mut self) -> Result<(), EnvError> {
        let id = self.allocate_id();
        let result = match self.call(&Request::Shutdown { id }) {
            Ok(Reply::Ack(_)) => Ok(()),
            Ok(other) => Err(unexpected(other)),
            Err(e) => Err(e),
        };
        self.wait_for_exit(Duration::from_secs(5));
        result
    }
}

impl Drop for WireEnvironment {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
        if let Some(socket) = self.socket.take() {
            let _ = socket.shutdown(std::net::Shutdown::Both);
        }
    }
}
