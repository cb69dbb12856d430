#![no_main]

use libfuzzer_sys::fuzz_target;
use unfold::rpca::UnfoldedRpcaModel;
use unfold::sparse::ListaModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = UnfoldedRpcaModel::decode(data) {
        assert_eq!(UnfoldedRpcaModel::decode(&m.encode().unwrap()).unwrap(), m);
    }
    if let Ok(m) = ListaModel::decode(data) {
        assert_eq!(ListaModel::decode(&m.encode().unwrap()).unwrap(), m);
    }
});
