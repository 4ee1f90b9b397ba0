fn main() {
    // Complex SVD and matrix products come from the system reference
    // LAPACK/BLAS; only zgesdd_/zgesvd_/zgemm_ are bound in src/linalg.rs.
    println!("cargo:rustc-link-lib=dylib=lapack");
    println!("cargo:rustc-link-lib=dylib=blas");
}
