//! TCP sequence executor: one connection per sequence, send messages in
//! order, read until the adapter delimits at least one complete response or
//! the per-response timeout elapses.

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use crate::adapters::AdapterContract;
use crate::corpus::{response_prefix_hash, ResponseSignature};
use crate::schema::StateId;

use super::{ConnectionResult, ExecutionOutcome, MessageExchange, Timeouts};

pub fn resolve_endpoint(endpoint: &str) -> std::io::Result<SocketAddr> {
    endpoint
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| std::io::Error::new(ErrorKind::NotFound, "endpoint resolved to no address"))
}

/// Executes one sequence against the target. Total: connection failures and
/// timeouts become part of the outcome, never errors.
pub fn execute(
    sequence: &[Vec<u8>],
    endpoint: SocketAddr,
    timeouts: &Timeouts,
    adapter: &AdapterContract,
) -> ExecutionOutcome {
    let connect_timeout = Duration::from_millis(timeouts.connect_ms.max(1));
    let stream = match TcpStream::connect_timeout(&endpoint, connect_timeout) {
        Ok(s) => s,
        Err(_) => {
            return ExecutionOutcome {
                exchanges: Vec::new(),
                connection_result: ConnectionResult::Refuse,
                crash_signal: false,
                per_exchange_states: Vec::new(),
                state_path: Vec::new(),
            }
        }
    };
    let _ = stream.set_nodelay(true);

    let mut conn = Conn {
        stream,
        buffer: Vec::new(),
        attributed: 0,
        eof: false,
        reset: false,
    };
    let per_response = Duration::from_millis(timeouts.per_response_ms.max(1));
    let mut exchanges: Vec<MessageExchange> = Vec::new();

    for (i, message) in sequence.iter().enumerate() {
        if conn.eof || conn.reset {
            break;
        }
        let started = Instant::now();
        if conn.stream.write_all(message).is_err() {
            conn.reset = true;
            exchanges.push(MessageExchange {
                request: message.clone(),
                response: Vec::new(),
                rtt_ms: started.elapsed().as_millis() as u64,
                timeout: false,
                closed: true,
            });
            break;
        }

        let mut timeout = false;
        let response;
        loop {
            // Complete frames beyond the attribution point belong to this
            // message.
            let pending = &conn.buffer[conn.attributed..];
            let stream_view = adapter.delimit_responses(pending);
            if stream_view.frame_count() > 0 {
                let consumed = stream_view.consumed_len();
                response = conn.buffer[conn.attributed..conn.attributed + consumed].to_vec();
                conn.attributed += consumed;
                break;
            }
            if conn.eof || conn.reset {
                response = Vec::new();
                break;
            }
            let remaining = per_response.checked_sub(started.elapsed());
            let Some(remaining) = remaining else {
                timeout = true;
                response = Vec::new();
                break;
            };
            conn.read_chunk(remaining);
        }

        exchanges.push(MessageExchange {
            request: message.clone(),
            response,
            rtt_ms: started.elapsed().as_millis() as u64,
            timeout,
            closed: conn.eof || conn.reset,
        });
        if timeouts.inter_message_ms > 0 && i + 1 < sequence.len() {
            std::thread::sleep(Duration::from_millis(timeouts.inter_message_ms));
        }
    }

    // Leftover bytes (partial frames, late garbage) belong to the last
    // exchange that saw traffic.
    if conn.attributed < conn.buffer.len() {
        if let Some(last) = exchanges.last_mut() {
            last.response
                .extend_from_slice(&conn.buffer[conn.attributed..]);
        }
    }

    let last_timed_out = exchanges.last().map(|e| e.timeout).unwrap_or(false);
    let connection_result = if conn.reset {
        ConnectionResult::Reset
    } else if conn.eof {
        ConnectionResult::CleanClose
    } else if last_timed_out {
        // Timeout with the connection still open: the server is holding it.
        ConnectionResult::Hang
    } else {
        ConnectionResult::CleanClose
    };

    // A server that dropped the connection without answering the message
    // that killed it may have crashed; probe once.
    let terminated_silently = (conn.eof || conn.reset)
        && exchanges
            .last()
            .map(|e| e.closed && e.response.is_empty())
            .unwrap_or(false);
    let crash_signal = if terminated_silently {
        probe_refused(endpoint, connect_timeout)
    } else {
        false
    };
    drop(conn);

    let per_exchange_states: Vec<Vec<StateId>> = exchanges
        .iter()
        .map(|e| adapter.extract_response_state(&e.response))
        .collect();
    let state_path = per_exchange_states.iter().flatten().copied().collect();

    ExecutionOutcome {
        exchanges,
        connection_result,
        crash_signal,
        per_exchange_states,
        state_path,
    }
}

/// True when an immediate reconnect is actively refused (the listener is
/// gone), the desk-scale stand-in for a process-level crash signal.
fn probe_refused(endpoint: SocketAddr, connect_timeout: Duration) -> bool {
    match TcpStream::connect_timeout(&endpoint, connect_timeout.min(Duration::from_millis(250))) {
        Ok(_) => false,
        Err(e) => e.kind() == ErrorKind::ConnectionRefused,
    }
}

struct Conn {
    stream: TcpStream,
    buffer: Vec<u8>,
    attributed: usize,
    eof: bool,
    reset: bool,
}

impl Conn {
    fn read_chunk(&mut self, timeout: Duration) {
        let _ = self.stream.set_read_timeout(Some(timeout.max(Duration::from_millis(1))));
        let mut chunk = [0u8; 4096];
        match self.stream.read(&mut chunk) {
            Ok(0) => self.eof = true,
            Ok(n) => self.buffer.extend_from_slice(&chunk[..n]),
            Err(e) => match e.kind() {
                ErrorKind::WouldBlock | ErrorKind::TimedOut => {}
                ErrorKind::ConnectionReset | ErrorKind::BrokenPipe => self.reset = true,
                _ => self.reset = true,
            },
        }
    }
}

impl ExecutionOutcome {
    /// State path plus 64-byte response prefix hashes, one per exchange.
    pub fn signature(&self) -> ResponseSignature {
        ResponseSignature {
            state_path: self.state_path.clone(),
            response_prefix_hashes: self
                .exchanges
                .iter()
                .map(|e| response_prefix_hash(&e.response))
                .collect(),
        }
    }
}
