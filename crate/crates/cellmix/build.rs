fn main() {
    // System OpenBLAS carries the LAPACK entry points we need (zgeev, zgetrf,
    // zgetrs, zgemm, dgbtrf, dgbtrs).
    println!("cargo:rustc-link-lib=openblas");
}
