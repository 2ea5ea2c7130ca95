# cython: language_level=3
"""Compiled staleness kernel.

Same contract as _staleness_pure.StalenessKernel, with membership sets and
snapshots held as flat uint64 word arrays.  Snapshot rows are full copies
(one memcpy at gradient creation); the per-application cost is a popcount
scan plus, for the loose measure, a frontier walk over unseen gradients.
"""

from libc.stdlib cimport calloc, free
from libc.string cimport memcpy

ctypedef unsigned long long u64

cdef extern from *:
    """
    #include <stdint.h>
    static inline uint64_t dasgd_popcount64(uint64_t x) {
    #if defined(__GNUC__) || defined(__clang__)
        return (uint64_t)__builtin_popcountll(x);
    #else
        x = x - ((x >> 1) & 0x5555555555555555ULL);
        x = (x & 0x3333333333333333ULL) + ((x >> 2) & 0x3333333333333333ULL);
        x = (x + (x >> 4)) & 0x0F0F0F0F0F0F0F0FULL;
        return (x * 0x0101010101010101ULL) >> 56;
    #endif
    }
    static inline int dasgd_ctz64(uint64_t x) {
    #if defined(__GNUC__) || defined(__clang__)
        return __builtin_ctzll(x);
    #else
        int n = 0;
        while (!(x & 1)) { x >>= 1; n++; }
        return n;
    #endif
    }
    """
    u64 dasgd_popcount64(u64 x) nogil
    int dasgd_ctz64(u64 x) nogil


cdef class StalenessKernel:
    cdef int _n_nodes
    cdef int _n_gradients
    cdef int _words          # current row stride, in 64-bit words
    cdef int _snap_rows      # allocated snapshot rows
    cdef u64 *_members       # n_nodes rows of _words
    cdef u64 *_snapshots     # _snap_rows rows of _words
    cdef int *_producers
    cdef u64 *_result        # scratch, _words
    cdef u64 *_seen          # scratch, _words
    cdef int *_stack         # scratch, _snap_rows

    def __cinit__(self, int n_nodes, int expected_gradients=0):
        if n_nodes < 1:
            raise ValueError("need at least one node")
        self._n_nodes = n_nodes
        self._n_gradients = 0
        self._words = max(4, (expected_gradients + 63) // 64)
        self._snap_rows = max(64, expected_gradients)
        self._members = <u64 *> calloc(n_nodes * self._words, sizeof(u64))
        self._snapshots = <u64 *> calloc(self._snap_rows * self._words, sizeof(u64))
        self._producers = <int *> calloc(self._snap_rows, sizeof(int))
        self._result = <u64 *> calloc(self._words, sizeof(u64))
        self._seen = <u64 *> calloc(self._words, sizeof(u64))
        self._stack = <int *> calloc(self._snap_rows, sizeof(int))
        if (self._members == NULL or self._snapshots == NULL
                or self._producers == NULL or self._result == NULL
                or self._seen == NULL or self._stack == NULL):
            raise MemoryError()

    def __dealloc__(self):
        free(self._members)
        free(self._snapshots)
        free(self._producers)
        free(self._result)
        free(self._seen)
        free(self._stack)

    @property
    def n_nodes(self):
        return self._n_nodes

    @property
    def n_gradients(self):
        return self._n_gradients

    cdef int _grow(self, int need_gid) except -1:
        # Widen rows and/or add snapshot rows so gid `need_gid` fits.
        cdef int new_words = self._words
        cdef int new_rows = self._snap_rows
        cdef u64 *buf
        cdef int *ibuf
        cdef int r
        while need_gid >= new_words * 64:
            new_words *= 2
        while need_gid >= new_rows:
            new_rows *= 2
        if new_words != self._words:
            buf = <u64 *> calloc(self._n_nodes * new_words, sizeof(u64))
            if buf == NULL:
                raise MemoryError()
            for r in range(self._n_nodes):
                memcpy(buf + r * new_words, self._members + r * self._words,
                       self._words * sizeof(u64))
            free(self._members)
            self._members = buf
            buf = <u64 *> calloc(new_rows * new_words, sizeof(u64))
            if buf == NULL:
                raise MemoryError()
            for r in range(self._n_gradients):
                memcpy(buf + r * new_words, self._snapshots + r * self._words,
                       self._words * sizeof(u64))
            free(self._snapshots)
            self._snapshots = buf
            free(self._result)
            free(self._seen)
            self._result = <u64 *> calloc(new_words, sizeof(u64))
            self._seen = <u64 *> calloc(new_words, sizeof(u64))
            if self._result == NULL or self._seen == NULL:
                raise MemoryError()
        elif new_rows != self._snap_rows:
            buf = <u64 *> calloc(new_rows * new_words, sizeof(u64))
            if buf == NULL:
                raise MemoryError()
            memcpy(buf, self._snapshots,
                   self._snap_rows * self._words * sizeof(u64))
            free(self._snapshots)
            self._snapshots = buf
        if new_rows != self._snap_rows:
            ibuf = <int *> calloc(new_rows, sizeof(int))
            if ibuf == NULL:
                raise MemoryError()
            memcpy(ibuf, self._producers, self._snap_rows * sizeof(int))
            free(self._producers)
            self._producers = ibuf
            ibuf = <int *> calloc(new_rows, sizeof(int))
            if ibuf == NULL:
                raise MemoryError()
            free(self._stack)
            self._stack = ibuf
        self._words = new_words
        self._snap_rows = new_rows
        return 0

    def register_gradient(self, int producer):
        """Mint the id for a gradient `producer` just finished computing.

        The producer's current set is copied into the gradient's snapshot
        row; the gradient itself is never part of its own snapshot.
        """
        if producer < 0 or producer >= self._n_nodes:
            raise IndexError("producer out of range")
        cdef int gid = self._n_gradients
        if gid >= self._words * 64 or gid >= self._snap_rows:
            self._grow(gid)
        memcpy(self._snapshots + gid * self._words,
               self._members + producer * self._words,
               self._words * sizeof(u64))
        self._producers[gid] = producer
        self._n_gradients += 1
        return gid

    def apply_gradient(self, int node, int gid):
        """Add gid to node's set; return (tight, loose) sizes measured
        against the node's set from before the insertion."""
        if node < 0 or node >= self._n_nodes:
            raise IndexError("node out of range")
        if gid < 0 or gid >= self._n_gradients:
            raise IndexError("unknown gradient id")
        cdef u64 *m = self._members + node * self._words
        cdef u64 *s = self._snapshots + gid * self._words
        if m[gid >> 6] >> (gid & 63) & 1:
            raise ValueError(
                "gradient %d already applied by node %d" % (gid, node))
        cdef int w
        cdef u64 tight = 0
        for w in range(self._words):
            tight += dasgd_popcount64(m[w] ^ s[w])
        cdef u64 loose = self._loose_size(m, s)
        m[gid >> 6] |= (<u64> 1) << (gid & 63)
        return (<int> tight, <int> loose)

    cdef u64 _loose_size(self, u64 *m, u64 *s) nogil:
        cdef int w, g, top
        cdef u64 fresh, x, acc
        cdef u64 *gs
        top = 0
        for w in range(self._words):
            self._result[w] = m[w] ^ s[w]
            fresh = s[w] & ~m[w]
            self._seen[w] = fresh
            while fresh:
                self._stack[top] = (w << 6) + dasgd_ctz64(fresh)
                top += 1
                fresh &= fresh - 1
        while top > 0:
            top -= 1
            g = self._stack[top]
            gs = self._snapshots + g * self._words
            for w in range(self._words):
                self._result[w] |= m[w] ^ gs[w]
                fresh = gs[w] & ~m[w] & ~self._seen[w]
                self._seen[w] |= fresh
                while fresh:
                    self._stack[top] = (w << 6) + dasgd_ctz64(fresh)
                    top += 1
                    fresh &= fresh - 1
        acc = 0
        for w in range(self._words):
            acc += dasgd_popcount64(self._result[w])
        return acc

    def producer_of(self, int gid):
        if gid < 0 or gid >= self._n_gradients:
            raise IndexError("unknown gradient id")
        return self._producers[gid]

    def node_size(self, int node):
        if node < 0 or node >= self._n_nodes:
            raise IndexError("node out of range")
        cdef u64 acc = 0
        cdef int w
        cdef u64 *m = self._members + node * self._words
        for w in range(self._words):
            acc += dasgd_popcount64(m[w])
        return <int> acc

    def node_contains(self, int node, int gid):
        if node < 0 or node >= self._n_nodes:
            raise IndexError("node out of range")
        if gid < 0 or gid >= self._words * 64:
            return False
        return bool(self._members[node * self._words + (gid >> 6)]
                    >> (gid & 63) & 1)

    def node_members(self, int node):
        if node < 0 or node >= self._n_nodes:
            raise IndexError("node out of range")
        return self._row_to_ids(self._members + node * self._words)

    def snapshot_members(self, int gid):
        if gid < 0 or gid >= self._n_gradients:
            raise IndexError("unknown gradient id")
        return self._row_to_ids(self._snapshots + gid * self._words)

    cdef _row_to_ids(self, u64 *row):
        cdef list out = []
        cdef int w
        cdef u64 x
        for w in range(self._words):
            x = row[w]
            while x:
                out.append((w << 6) + dasgd_ctz64(x))
                x &= x - 1
        return frozenset(out)
