import numpy as np

from depcoder.config import RunConfig
from depcoder.connectivity import ConnectivityGraph, connectivity
from depcoder.corpus import Corpus
from depcoder.dependence import DependenceGraph
from depcoder.frontend import build_vocab, parse_listing, tokenize
from depcoder.masks import (MASK_NEG, build_bundle, dependence_mask,
                            global_mask, local_mask, pad_bundle, sparse_masks)
from depcoder.synth import generate_function

from oracles import naive_mask_bundle

NEG = MASK_NEG


def seq_of(body: str):
    listing = f".func f\n{body}\n"
    fn = parse_listing(listing)[0]
    return fn, tokenize(fn.instructions, build_vocab([listing]))


def con_of(body: str):
    from depcoder.dependence import dependence_graph
    fn, seq = seq_of(body)
    return seq, connectivity(dependence_graph(fn))


class TestGlobalMask:
    def test_cls_only(self):
        _, seq = seq_of("")
        assert np.array_equal(global_mask(seq), np.zeros((1, 1)))

    def test_row_and_column_zero_enabled(self):
        _, seq = seq_of("ret")  # N = 3
        m = global_mask(seq)
        assert np.all(m[0, :] == 0) and np.all(m[:, 0] == 0)
        assert np.all(m[1:, 1:] == NEG)


class TestLocalMask:
    def test_two_diagonal_blocks(self):
        # instruction token blocks of sizes 3 (<INST> push rax) and 2 (<INST> ret)
        _, seq = seq_of("push rax\nret")
        m = local_mask(seq)
        assert np.all(m[1:4, 1:4] == 0)
        assert np.all(m[4:6, 4:6] == 0)
        assert np.all(m[1:4, 4:6] == NEG)
        assert m[0, 0] == NEG  # [CLS] self-attention comes from the global mask

    def test_cross_instruction_blocked(self):
        _, seq = seq_of("mov rax, 1\nmov rbx, rax")
        m = local_mask(seq)
        p0, p1 = seq.inst_positions[0], seq.inst_positions[1]
        assert m[p0 + 1, p1 + 1] == NEG


class TestDependenceMask:
    def test_worked_six_instruction_program(self):
        # chain: 5 deps on 1, 4; 4 deps on 3; 6 deps on 5 (1-based)
        dep = DependenceGraph(6, {(4, 0, "data"), (4, 3, "data"),
                                  (3, 2, "data"), (5, 4, "data")})
        con = connectivity(dep)
        body = "\n".join(f"mov rax, {i}" for i in range(6))
        _, seq = seq_of(body)
        m = dependence_mask(seq, con)
        p = seq.inst_positions
        for other in (0, 2, 3, 5):
            assert m[p[4], p[other]] == 0
            assert m[p[other], p[4]] == 0
        assert m[p[4], p[1]] == NEG
        # non-<INST> entries stay blocked
        assert m[p[4] + 1, p[0]] == NEG

    def test_no_edges_all_blocked(self):
        seq, con = con_of("mov rax, 1\nmov rbx, 2")
        assert np.all(dependence_mask(seq, con) == NEG)

    def test_truncated_instructions_contribute_nothing(self):
        listing = ".func f\nmov rax, 1\nmov rbx, rax\nmov rcx, rbx\n"
        fn = parse_listing(listing)[0]
        from depcoder.dependence import dependence_graph
        con = connectivity(dependence_graph(fn))
        seq = tokenize(fn.instructions, build_vocab([listing]), max_len=11)
        assert seq.n_instructions == 2
        m = dependence_mask(seq, con)
        assert m.shape == (len(seq), len(seq))
        p = seq.inst_positions
        assert m[p[1], p[0]] == 0  # retained pair keeps its edge


class TestBundle:
    def test_single_instruction_all_enabled(self):
        seq, con = con_of("ret")
        bundle = build_bundle(seq, con)
        assert np.all(bundle.M == 0)

    def test_diagonal_and_symmetry(self):
        seq, con = con_of("mov rax, 1\nmov rbx, rax\nadd rbx, rax")
        bundle = build_bundle(seq, con)
        assert np.all(np.diag(bundle.M) == 0)
        assert np.array_equal(bundle.M, bundle.M.T)
        assert np.array_equal(bundle.R, bundle.R.T)
        assert all(np.any(row == 0) for row in bundle.M)

    def test_r_only_between_connected_inst_pairs(self):
        seq, con = con_of("mov rax, 1\nmov rbx, rax\nadd rbx, rax")
        bundle = build_bundle(seq, con)
        inst_positions = set(seq.inst_positions.values())
        for u, v in zip(*np.nonzero(bundle.R)):
            assert u in inst_positions and v in inst_positions
            t, s = seq.inst_of[u], seq.inst_of[v]
            assert t != s and con.connected(t, s)

    def test_worked_example_distances(self):
        dep = DependenceGraph(6, {(4, 0, "data"), (4, 3, "data"),
                                  (3, 2, "data"), (5, 4, "data")})
        con = connectivity(dep)
        body = "\n".join(f"mov rax, {i}" for i in range(6))
        _, seq = seq_of(body)
        bundle = build_bundle(seq, con)
        p = seq.inst_positions
        assert bundle.R[p[4], p[0]] == 1
        assert bundle.R[p[4], p[3]] == 1
        assert bundle.R[p[4], p[5]] == 1
        assert bundle.R[p[4], p[2]] == 2

    def test_matches_naive_oracle_on_random_programs(self):
        rng = np.random.default_rng(11)
        cfg = RunConfig()
        for trial in range(200):
            listing = "\n".join(generate_function(f"g{trial}", rng)) + "\n"
            corpus = Corpus.from_text(listing, cfg)
            art = corpus.functions[0]
            want_m, want_r = naive_mask_bundle(art.seq, art.con)
            assert np.array_equal(art.bundle.M, want_m), f"trial {trial}"
            assert np.array_equal(art.bundle.R, want_r), f"trial {trial}"

    def test_union_monotone_in_connectivity(self):
        seq, con = con_of("mov rax, 1\nmov rbx, 2\nmov rcx, 3")
        base = build_bundle(seq, con)
        richer = ConnectivityGraph.from_dict(con.to_dict())
        richer.dist[0, 1] = richer.dist[1, 0] = 1
        extended = build_bundle(seq, richer)
        assert np.all(extended.M >= base.M)

    def test_inst_mediated_two_hop_path(self):
        seq, con = con_of("mov rax, 1\nmov rbx, rax")
        bundle = build_bundle(seq, con)
        p0, p1 = seq.inst_positions[0], seq.inst_positions[1]
        i, j = p0 + 1, p1 + 1  # internal tokens of the two instructions
        assert bundle.M[i, j] == NEG
        assert bundle.M[i, p0] == 0
        assert bundle.M[p0, p1] == 0
        assert bundle.M[p1, j] == 0


class TestPadding:
    def test_pad_rows_masked_except_diagonal(self):
        seq, con = con_of("ret")
        padded = pad_bundle(build_bundle(seq, con), 6)
        n = len(seq)
        for i in range(n, 6):
            assert padded.M[i, i] == 0
            assert np.all(padded.M[i, :i] == NEG)
            assert np.all(padded.M[:i, i] == NEG)
        assert np.all(padded.R[n:, :] == 0)


class TestSparseSerialization:
    def test_pairs_sorted_and_consistent(self):
        seq, con = con_of("mov rax, 1\nmov rbx, rax")
        sp = sparse_masks(seq, con)
        assert sp["n"] == len(seq)
        for kind in ("global", "local", "dependence"):
            assert sp[kind] == sorted(sp[kind])
            assert all(i <= j for i, j in sp[kind])
        p0, p1 = seq.inst_positions[0], seq.inst_positions[1]
        assert [p0, p1] in sp["dependence"]
        assert [p0, p1, 1] in sp["r"]
