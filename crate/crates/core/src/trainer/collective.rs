//! Worker collectives: an in-process single-worker version and a TCP star
//! rooted at rank 0.
//!
//! Rank 0 binds an OS-assigned port on the loopback interface and publishes
//! the address in a launch file; the other ranks poll for the file and
//! connect. Reductions are summed by rank 0 in rank order and broadcast back,
//! so every worker sees bit-identical results.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Collective {
    fn rank(&self) -> usize;
    fn size(&self) -> usize;
    /// Every rank's buffer, indexed by rank.
    fn all_gather(&mut self, local: &[f64]) -> Result<Vec<Vec<f64>>>;
    /// Element-wise mean over ranks, summed in rank order.
    fn all_reduce_mean(&mut self, local: &[f64]) -> Result<Vec<f64>>;
    /// Rank 0's buffer on every rank.
    fn broadcast(&mut self, data: &[f64]) -> Result<Vec<f64>>;
}

/// The degenerate one-worker topology.
#[derive(Debug, Default)]
pub struct SingleWorker;

impl Collective for SingleWorker {
    fn rank(&self) -> usize {
        0
    }
    fn size(&self) -> usize {
        1
    }
    fn all_gather(&mut self, local: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![local.to_vec()])
    }
    fn all_reduce_mean(&mut self, local: &[f64]) -> Result<Vec<f64>> {
        Ok(local.to_vec())
    }
    fn broadcast(&mut self, data: &[f64]) -> Result<Vec<f64>> {
        Ok(data.to_vec())
    }
}

/// Contents of the rendezvous file written by rank 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchInfo {
    pub host: String,
    pub port: u16,
    pub workers: usize,
}

const IO_TIMEOUT: Duration = Duration::from_secs(120);
const RENDEZVOUS_TIMEOUT: Duration = Duration::from_secs(60);

struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Conn {
    fn new(stream: TcpStream) -> std::io::Result<Conn> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(IO_TIMEOUT))?;
        stream.set_write_timeout(Some(IO_TIMEOUT))?;
        Ok(Conn {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    fn send(&mut self, data: &[f64]) -> std::io::Result<()> {
        self.writer.write_all(&(data.len() as u64).to_le_bytes())?;
        for v in data {
            self.writer.write_all(&v.to_le_bytes())?;
        }
        self.writer.flush()
    }

    fn recv(&mut self) -> std::io::Result<Vec<f64>> {
        let mut len = [0u8; 8];
        self.reader.read_exact(&mut len)?;
        let n = u64::from_le_bytes(len) as usize;
        let mut bytes = vec![0u8; n * 8];
        self.reader.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

pub struct TcpCollective {
    rank: usize,
    size: usize,
    /// Rank 0: connections to ranks 1..size in rank order. Others: one
    /// connection to rank 0.
    peers: Vec<Conn>,
}

impl TcpCollective {
    /// Binds a free loopback port and writes the launch file, without waiting
    /// for peers. Complete with [`TcpCollective::accept`].
    pub fn bind_root(workers: usize, launch_file: &Path) -> Result<TcpListener> {
        if workers == 0 {
            return Err(Error::invalid("worker count must be >= 1"));
        }
        let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| worker_err(0, "bind", e))?;
        let addr = listener.local_addr().map_err(|e| worker_err(0, "bind", e))?;
        let info = LaunchInfo {
            host: addr.ip().to_string(),
            port: addr.port(),
            workers,
        };
        let tmp = launch_file.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(&info)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, launch_file).map_err(|e| Error::io(launch_file, e))?;
        Ok(listener)
    }

    /// Rank 0: waits for the other ranks to connect and identify themselves.
    pub fn accept(listener: TcpListener, workers: usize) -> Result<TcpCollective> {
        let mut slots: Vec<Option<Conn>> = (1..workers).map(|_| None).collect();
        for _ in 1..workers {
            let (stream, _) = listener.accept().map_err(|e| worker_err(0, "accept", e))?;
            let mut conn = Conn::new(stream).map_err(|e| worker_err(0, "accept", e))?;
            let hello = conn.recv().map_err(|e| worker_err(0, "handshake", e))?;
            let peer = match hello.as_slice() {
                [r] if *r >= 1.0 && (*r as usize) < workers && r.fract() == 0.0 => *r as usize,
                _ => return Err(Error::Worker {
                    rank: 0,
                    message: format!("bad handshake {hello:?}"),
                }),
            };
            if slots[peer - 1].replace(conn).is_some() {
                return Err(Error::Worker {
                    rank: peer,
                    message: "rank connected twice".into(),
                });
            }
        }
        Ok(TcpCollective {
            rank: 0,
            size: workers,
            peers: slots.into_iter().map(|c| c.expect("every rank connected")).collect(),
        })
    }

    /// Ranks 1..n: waits for the launch file and connects to rank 0.
    pub fn connect(rank: usize, launch_file: &Path) -> Result<TcpCollective> {
        let start = Instant::now();
        let info: LaunchInfo = loop {
            match fs::read(launch_file) {
                Ok(bytes) => break serde_json::from_slice(&bytes)?,
                Err(_) if start.elapsed() < RENDEZVOUS_TIMEOUT => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(Error::io(launch_file, e)),
            }
        };
        if rank == 0 || rank >= info.workers {
            return Err(Error::invalid(format!("rank {rank} invalid for {} workers", info.workers)));
        }
        let stream = TcpStream::connect((info.host.as_str(), info.port)).map_err(|e| worker_err(rank, "connect", e))?;
        let mut conn = Conn::new(stream).map_err(|e| worker_err(rank, "connect", e))?;
        conn.send(&[rank as f64]).map_err(|e| worker_err(rank, "handshake", e))?;
        Ok(TcpCollective {
            rank,
            size: info.workers,
            peers: vec![conn],
        })
    }

    fn gather_to_root(&mut self, local: &[f64]) -> Result<Option<Vec<Vec<f64>>>> {
        if self.rank == 0 {
            let mut all = vec![local.to_vec()];
            for (i, peer) in self.peers.iter_mut().enumerate() {
                all.push(peer.recv().map_err(|e| worker_err(i + 1, "receive", e))?);
            }
            Ok(Some(all))
        } else {
            let rank = self.rank;
            self.peers[0].send(local).map_err(|e| worker_err(rank, "send", e))?;
            Ok(None)
        }
    }

    fn root_broadcast(&mut self, data: Option<Vec<f64>>) -> Result<Vec<f64>> {
        match data {
            Some(d) => {
                for (i, peer) in self.peers.iter_mut().enumerate() {
                    peer.send(&d).map_err(|e| worker_err(i + 1, "send", e))?;
                }
                Ok(d)
            }
            None => {
                let rank = self.rank;
                self.peers[0].recv().map_err(|e| worker_err(rank, "receive", e))
            }
        }
    }
}

fn worker_err(rank: usize, what: &str, e: std::io::Error) -> Error {
    Error::Worker {
        rank,
        message: format!("{what} failed: {e}"),
    }
}

impl Collective for TcpCollective {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.size
    }

    fn all_gather(&mut self, local: &[f64]) -> Result<Vec<Vec<f64>>> {
        let gathered = self.gather_to_root(local)?;
        // lengths first, then the concatenation
        let packed = gathered.map(|all| {
            let mut v: Vec<f64> = all.iter().map(|b| b.len() as f64).collect();
            for b in &all {
                v.extend_from_slice(b);
            }
            v
        });
        let packed = self.root_broadcast(packed)?;
        let n = self.size;
        if packed.len() < n {
            return Err(Error::Worker {
                rank: self.rank,
                message: "short all-gather message".into(),
            });
        }
        let mut out = Vec::with_capacity(n);
        let mut pos = n;
        for &len in &packed[..n] {
            let len = len as usize;
            let end = pos + len;
            if end > packed.len() {
                return Err(Error::Worker {
                    rank: self.rank,
                    message: "short all-gather message".into(),
                });
            }
            out.push(packed[pos..end].to_vec());
            pos = end;
        }
        Ok(out)
    }

    fn all_reduce_mean(&mut self, local: &[f64]) -> Result<Vec<f64>> {
        let gathered = self.gather_to_root(local)?;
        let reduced = match gathered {
            Some(all) => {
                if let Some((r, b)) = all.iter().enumerate().find(|(_, b)| b.len() != local.len()) {
                    return Err(Error::Worker {
                        rank: r,
                        message: format!("gradient length {} != {}", b.len(), local.len()),
                    });
                }
                let mut sum = all[0].clone();
                for b in &all[1..] {
                    for (s, v) in sum.iter_mut().zip(b) {
                        *s += v;
                    }
                }
                let n = self.size as f64;
                sum.iter_mut().for_each(|s| *s /= n);
                Some(sum)
            }
            None => None,
        };
        self.root_broadcast(reduced)
    }

    fn broadcast(&mut self, data: &[f64]) -> Result<Vec<f64>> {
        let d = if self.rank == 0 { Some(data.to_vec()) } else { None };
        self.root_broadcast(d)
    }
}

/// Builds one TCP collective per rank inside this process, one thread each.
pub fn spawn_local<T, F>(workers: usize, launch_file: &Path, body: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut dyn Collective) -> Result<T> + Sync,
{
    let listener = TcpCollective::bind_root(workers, launch_file)?;
    std::thread::scope(|scope| {
        let body = &body;
        let handles: Vec<_> = (1..workers)
            .map(|rank| {
                scope.spawn(move || -> Result<T> {
                    let mut c = TcpCollective::connect(rank, launch_file)?;
                    body(&mut c)
                })
            })
            .collect();
        let root = TcpCollective::accept(listener, workers).and_then(|mut c| body(&mut c));
        let mut results = vec![root];
        for (i, h) in handles.into_iter().enumerate() {
            results.push(h.join().unwrap_or_else(|_| {
                Err(Error::Worker {
                    rank: i + 1,
                    message: "worker thread panicked".into(),
                })
            }));
        }
        results.into_iter().collect()
    })
}
