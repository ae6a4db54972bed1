"""Fixed byte vocabularies shared by the corpus generator and the action pools.

Malicious and benign motifs are disjoint.  The donor strings are the kind
of content found in benign resources (version info, manifests, common
imports); actions that write filler use them the same way evasion tools
splice in bytes harvested from goodware.
"""

MALWARE_MOTIFS: tuple[bytes, ...] = (
    b"CreateRemoteThread",
    b"WriteProcessMemory",
    b"VirtualAllocEx",
    b"NtUnmapViewOfSection",
    b"cmd.exe /c del ",
    b"\\\\.\\PhysicalDrive0",
    b"SeDebugPrivilege",
    b"keylog.dat",
    b"\xfc\xe8\x82\x00\x00\x00\x60\x89\xe5\x31\xc0",
    b"\x64\x8b\x52\x30\x8b\x52\x0c\x8b\x52\x14",
    b"\x68\x33\x32\x00\x00\x68\x77\x73\x32\x5f",
    b"\xeb\xfe\x90\x90\xcc\xcc\x31\xc9\xf7\xe1",
    b"bcdedit /set recoveryenabled no",
    b"vssadmin delete shadows",
    b"YOUR FILES ARE ENCRYPTED",
    b"URLDownloadToFileA",
)

BENIGN_MOTIFS: tuple[bytes, ...] = (
    b"Microsoft Corporation",
    b"FileDescription",
    b"LegalCopyright",
    b"ProductVersion",
    b"StringFileInfo",
    b"VS_VERSION_INFO",
    b"InitCommonControlsEx",
    b"<requestedExecutionLevel level=\"asInvoker\"",
    b"\x55\x8b\xec\x83\xec\x10\x53\x56\x57",
    b"\x8b\x4d\xfc\x33\xcd\xe8",
    b"\x48\x89\x5c\x24\x08\x57\x48\x83\xec\x20",
    b"GetSystemTimeAsFileTime",
    b"Copyright (C) ",
    b"OriginalFilename",
    b"CompanyName",
    b"api-ms-win-crt-runtime",
)

# class-neutral content present in both classes
SHARED_MOTIFS: tuple[bytes, ...] = (
    b"KERNEL32.dll",
    b"GetProcAddress",
    b"LoadLibraryA",
    b"GetModuleHandleA",
    b"\x8b\xff\x55\x8b\xec",
    b"\xc3\xcc\xcc\xcc\xcc",
    b"ExitProcess",
    b"\x6a\x00\xff\x15",
    b"HeapAlloc",
    b"MultiByteToWideChar",
    b"\x83\xc4\x08\x85\xc0\x74",
    b"CloseHandle",
    b"ReadFile",
    b"WriteFile",
    b"GetLastError",
    b"\x33\xc0\x5d\xc2\x04\x00",
)

DONOR_STRINGS: tuple[bytes, ...] = (
    b"VS_VERSION_INFO\0StringFileInfo\0CompanyName\0Microsoft Corporation\0",
    b"FileDescription\0ProductVersion\0LegalCopyright\0Copyright (C) \0",
    b"<requestedExecutionLevel level=\"asInvoker\" uiAccess=\"false\"/>",
    b"OriginalFilename\0InitCommonControlsEx\0GetSystemTimeAsFileTime\0",
)
