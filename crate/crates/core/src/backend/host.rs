//! Thin wrappers over the host's virtual memory syscalls.

use std::io;
use std::ptr;

pub(crate) fn page_size() -> usize {
    // SAFETY: sysconf has no preconditions.
    let size = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if size <= 0 {
        4096
    } else {
        size as usize
    }
}

fn check(ret: libc::c_int) -> io::Result<()> {
    if ret == 0 {
        Ok(())
    } else {
        Err(io::Error::last_os_error())
    }
}

/// Maps `len` bytes of private anonymous memory without reserving swap.
/// With `accessible == false` the range is `PROT_NONE` until committed.
pub(crate) fn map_anon(len: usize, accessible: bool) -> io::Result<usize> {
    let prot = if accessible {
        libc::PROT_READ | libc::PROT_WRITE
    } else {
        libc::PROT_NONE
    };
    // SAFETY: anonymous mapping at a kernel-chosen address.
    let ptr = unsafe {
        libc::mmap(
            ptr::null_mut(),
            len,
            prot,
            libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
            -1,
            0,
        )
    };
    if ptr == libc::MAP_FAILED {
        return Err(io::Error::last_os_error());
    }
    Ok(ptr as usize)
}

pub(crate) fn protect(addr: usize, len: usize, accessible: bool) -> io::Result<()> {
    if len == 0 {
        return Ok(());
    }
    let prot = if accessible {
        libc::PROT_READ | libc::PROT_WRITE
    } else {
        libc::PROT_NONE
    };
    // SAFETY: callers only pass ranges inside mappings they own.
    check(unsafe { libc::mprotect(addr as *mut libc::c_void, len, prot) })
}

/// Drops the backing pages of a range; later reads see zeroes.
pub(crate) fn discard(addr: usize, len: usize) -> io::Result<()> {
    if len == 0 {
        return Ok(());
    }
    // SAFETY: range is owned by the caller and no longer referenced.
    check(unsafe { libc::madvise(addr as *mut libc::c_void, len, libc::MADV_DONTNEED) })
}

pub(crate) fn remap(addr: usize, old_len: usize, new_len: usize) -> io::Result<usize> {
    // SAFETY: `addr..addr+old_len` is a live mapping owned by the caller.
    let ptr = unsafe {
        libc::mremap(
            addr as *mut libc::c_void,
            old_len,
            new_len,
            libc::MREMAP_MAYMOVE,
        )
    };
    if ptr == libc::MAP_FAILED {
        return Err(io::Error::last_os_error());
    }
    Ok(ptr as usize)
}

pub(crate) fn unmap(addr: usize, len: usize) -> io::Result<()> {
    // SAFETY: range is a live mapping owned by the caller.
    check(unsafe { libc::munmap(addr as *mut libc::c_void, len) })
}

pub(crate) fn lock(addr: usize, len: usize) -> io::Result<()> {
    // SAFETY: mlock only changes residency of an owned range.
    check(unsafe { libc::mlock(addr as *const libc::c_void, len) })
}

pub(crate) fn unlock(addr: usize, len: usize) -> io::Result<()> {
    // SAFETY: as for `lock`.
    check(unsafe { libc::munlock(addr as *const libc::c_void, len) })
}

/// Faults in every page of a range by rewriting one byte per page.
pub(crate) fn touch_pages(addr: usize, len: usize, page: usize) {
    let mut p = addr;
    while p < addr + len {
        // SAFETY: the range is committed and writable; the byte is written
        // back unchanged.
        unsafe {
            let b = ptr::read_volatile(p as *const u8);
            ptr::write_volatile(p as *mut u8, b);
        }
        p += page;
    }
}
