use pyo3::prelude::*;
use pyo3::types::PyDict;

#[test]
fn module_works_in_an_embedded_interpreter() {
    use pyturbolab::pyturbolab;
    pyo3::append_to_inittab!(pyturbolab);
    Python::initialize();
    Python::attach(|py| {
        let locals = PyDict::new(py);
        py.run(
            c"
import pyturbolab as tl
code = tl.TurboCode('lte', k=24, interleaver_seed=5)
u = [i % 2 for i in range(24)]
x = code.encode(u)
decoded = code.decode([[3.0 * v for v in row] for row in x], 'awgn:snr=6')
counts = tl.TurboAE('canonical').param_counts()
csv = tl.measure('rep3', 'awgn', [0.0], seed=2, k=20, max_bits=20000)
try:
    tl.measure('rep3', 'nonsense', [0.0])
    bad_channel = False
except ValueError:
    bad_channel = True
",
            None,
            Some(&locals),
        )
        .unwrap();
        let get = |k: &str| locals.get_item(k).unwrap().unwrap();
        assert_eq!(get("decoded").extract::<Vec<u32>>().unwrap(), (0..24).map(|i| i % 2).collect::<Vec<u32>>());
        assert_eq!(get("counts").extract::<(usize, usize)>().unwrap(), (152_403, 2_453_656));
        let csv: String = get("csv").extract().unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(get("bad_channel").extract::<bool>().unwrap());
    });
}
