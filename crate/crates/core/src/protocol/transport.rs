use std::collections::VecDeque;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use super::{handle_line, ProtocolError, Response, TrainerResponse, TrainerService};

/// Newline framed, one line per message.
pub trait Transport: Send {
    fn send_line(&mut self, line: &str) -> Result<(), ProtocolError>;
    fn recv_line(&mut self, timeout: Duration) -> Result<String, ProtocolError>;
}

/// In-process transport that still goes through the wire encoding.
pub struct LocalTransport<S> {
    service: S,
    outbox: VecDeque<String>,
    closed: bool,
}

impl<S: TrainerService + Send> LocalTransport<S> {
    pub fn new(service: S) -> Self {
        LocalTransport {
            service,
            outbox: VecDeque::new(),
            closed: false,
        }
    }

    pub fn service(&self) -> &S {
        &self.service
    }

    pub fn into_service(self) -> S {
        self.service
    }
}

impl<S: TrainerService + Send> Transport for LocalTransport<S> {
    fn send_line(&mut self, line: &str) -> Result<(), ProtocolError> {
        if self.closed {
            return Err(ProtocolError::ConnectionLost);
        }
        let out = handle_line(&mut self.service, line);
        if matches!(Response::decode(&out), Ok(Response { body: TrainerResponse::Goodbye {}, .. })) {
            self.closed = true;
        }
        self.outbox.push_back(out);
        Ok(())
    }

    fn recv_line(&mut self, _timeout: Duration) -> Result<String, ProtocolError> {
        self.outbox.pop_front().ok_or(ProtocolError::ConnectionLost)
    }
}

/// Trainer running as a child process, spoken to over stdin/stdout.
pub struct ChildProcess {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<io::Result<String>>,
}

impl ChildProcess {
    /// Launches `command[0]` with the remaining elements as arguments.
    pub fn spawn(command: &[String]) -> io::Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "empty trainer command"))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take();
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| io::Error::other("trainer stdout unavailable"))?;
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if matches!(&line, Ok(l) if l.trim().is_empty()) {
                    continue;
                }
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Ok(ChildProcess {
            child,
            stdin,
            lines: rx,
        })
    }

    pub fn id(&self) -> u32 {
        self.child.id()
    }

    /// Waits up to `timeout` for the process to exit.
    pub fn wait_exit(&mut self, timeout: Duration) -> io::Result<Option<ExitStatus>> {
        self.stdin.take();
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(status) = self.child.try_wait()? {
                return Ok(Some(status));
            }
            if Instant::now() >= deadline {
                return Ok(None);
            }
            thread::sleep(Duration::from_millis(10));
        }
    }
}

impl Transport for ChildProcess {
    fn send_line(&mut self, line: &str) -> Result<(), ProtocolError> {
        let stdin = self.stdin.as_mut().ok_or(ProtocolError::ConnectionLost)?;
        let result = stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.write_all(b"\n"))
            .and_then(|_| stdin.flush());
        match result {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Err(ProtocolError::ConnectionLost),
            Err(e) => Err(e.into()),
        }
    }

    fn recv_line(&mut self, timeout: Duration) -> Result<String, ProtocolError> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(e.into()),
            Err(RecvTimeoutError::Timeout) => Err(ProtocolError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(ProtocolError::ConnectionLost),
        }
    }
}

impl Drop for ChildProcess {
    fn drop(&mut self) {
        if let Ok(None) = self.wait_exit(Duration::from_secs(2)) {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

/// Trainer listening on a TCP socket, same framing as stdio.
pub struct TcpTransport {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl TcpTransport {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(TcpTransport { writer: stream, reader })
    }
}

impl Transport for TcpTransport {
    fn send_line(&mut self, line: &str) -> Result<(), ProtocolError> {
        let result = self
            .writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.write_all(b"\n"))
            .and_then(|_| self.writer.flush());
        match result {
            Ok(()) => Ok(()),
            Err(e) if matches!(e.kind(), io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset) => {
                Err(ProtocolError::ConnectionLost)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn recv_line(&mut self, timeout: Duration) -> Result<String, ProtocolError> {
        self.reader.get_ref().set_read_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        loop {
            let mut line = String::new();
            match self.reader.read_line(&mut line) {
                Ok(0) => return Err(ProtocolError::ConnectionLost),
                Ok(_) if line.trim().is_empty() => continue,
                Ok(_) => return Ok(line.trim_end_matches(['\r', '\n']).to_string()),
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    return Err(ProtocolError::Timeout(timeout))
                }
                Err(e) if e.kind() == io::ErrorKind::ConnectionReset => return Err(ProtocolError::ConnectionLost),
                Err(e) => return Err(e.into()),
            }
        }
    }
}
