//! No-op echo service for replication microbenchmarks. The handler just
//! reflects the request; everything commutes.

use crate::error::Result;
use crate::pheap::Arena;
use crate::service::{status, ExecCtx, LockSet, RefModel, Service};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct EchoService {
    payload_len: usize,
}

impl EchoService {
    pub fn new(payload_len: usize) -> EchoService {
        EchoService { payload_len }
    }
}

impl Default for EchoService {
    fn default() -> Self {
        EchoService::new(8)
    }
}

impl Service for EchoService {
    fn name(&self) -> &'static str {
        "echo"
    }

    fn init(&self, _arena: &Arena) -> Result<()> {
        Ok(())
    }

    fn handle(
        &self,
        _ctx: &mut ExecCtx<'_>,
        request: &[u8],
        _locks: &mut LockSet,
        response: &mut Vec<u8>,
    ) -> Result<()> {
        response.push(status::OK);
        response.extend_from_slice(request);
        Ok(())
    }

    fn commutes(&self, _a: &[u8], _b: &[u8]) -> bool {
        true
    }

    fn is_read(&self, _request: &[u8]) -> bool {
        false
    }

    fn sample_request(&self, rng: &mut ChaCha8Rng) -> Vec<u8> {
        (0..self.payload_len).map(|_| rng.random()).collect()
    }

    fn recover_check(&self, _arena: &Arena) -> Result<Vec<String>> {
        Ok(vec![])
    }

    fn state_digest(&self, _arena: &Arena) -> Result<Vec<u8>> {
        Ok(vec![])
    }

    fn new_model(&self) -> Box<dyn RefModel> {
        Box::new(EchoModel)
    }
}

struct EchoModel;

impl RefModel for EchoModel {
    fn apply(&mut self, request: &[u8]) -> Vec<u8> {
        let mut r = vec![status::OK];
        r.extend_from_slice(request);
        r
    }

    fn digest(&self) -> Vec<u8> {
        vec![]
    }
}
