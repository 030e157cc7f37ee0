//! Credential material and rustls configuration for the mutually
//! authenticated channel.
//!
//! Every party (carts, broker, server) holds a certificate issued by a shared
//! deployment CA whose subject alternative name is its identity. Servers
//! require a client certificate; the identity a client announces in HELLO must
//! match a name in its certificate.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rcgen::{
    BasicConstraints, CertificateParams, DnType, ExtendedKeyUsagePurpose, IsCa, KeyPair,
    KeyUsagePurpose,
};
use rustls::crypto::ring::default_provider;
use rustls::crypto::CryptoProvider;
use rustls::server::WebPkiClientVerifier;
use rustls::{ClientConfig, RootCertStore, ServerConfig};
use rustls_pki_types::pem::PemObject;
use rustls_pki_types::{CertificateDer, PrivateKeyDer, ServerName};

#[derive(Debug, thiserror::Error)]
pub enum TlsError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Pem { path: PathBuf, message: String },
    #[error("tls configuration: {0}")]
    Config(String),
    #[error("certificate generation: {0}")]
    Generate(String),
    #[error("identity `{0}` is not a valid DNS-style name")]
    BadIdentity(String),
    #[error("peer certificate is not valid for identity `{0}`")]
    IdentityMismatch(String),
}

/// A party's certificate chain, private key, and the CA it trusts.
#[derive(Debug)]
pub struct Credentials {
    pub identity: String,
    pub ca: Vec<CertificateDer<'static>>,
    pub chain: Vec<CertificateDer<'static>>,
    pub key: PrivateKeyDer<'static>,
}

impl Clone for Credentials {
    fn clone(&self) -> Self {
        Self {
            identity: self.identity.clone(),
            ca: self.ca.clone(),
            chain: self.chain.clone(),
            key: self.key.clone_key(),
        }
    }
}

fn provider() -> Arc<CryptoProvider> {
    Arc::new(default_provider())
}

fn read_certs(path: &Path) -> Result<Vec<CertificateDer<'static>>, TlsError> {
    let certs = CertificateDer::pem_file_iter(path)
        .map_err(|e| TlsError::Pem {
            path: path.to_owned(),
            message: e.to_string(),
        })?
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| TlsError::Pem {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
    if certs.is_empty() {
        return Err(TlsError::Pem {
            path: path.to_owned(),
            message: "no certificates found".into(),
        });
    }
    Ok(certs)
}

impl Credentials {
    /// Loads `ca.pem`, `<identity>.pem` and `<identity>.key` from `dir`.
    pub fn load(dir: &Path, identity: &str) -> Result<Self, TlsError> {
        let key_path = dir.join(format!("{identity}.key"));
        let key = PrivateKeyDer::from_pem_file(&key_path).map_err(|e| TlsError::Pem {
            path: key_path.clone(),
            message: e.to_string(),
        })?;
        Ok(Self {
            identity: identity.to_owned(),
            ca: read_certs(&dir.join("ca.pem"))?,
            chain: read_certs(&dir.join(format!("{identity}.pem")))?,
            key,
        })
    }

    pub fn server_config(&self) -> Result<Arc<ServerConfig>, TlsError> {
        let roots = self.roots()?;
        let verifier = WebPkiClientVerifier::builder_with_provider(Arc::new(roots), provider())
            .build()
            .map_err(|e| TlsError::Config(e.to_string()))?;
        let cfg = ServerConfig::builder_with_provider(provider())
            .with_safe_default_protocol_versions()
            .map_err(|e| TlsError::Config(e.to_string()))?
            .with_client_cert_verifier(verifier)
            .with_single_cert(self.chain.clone(), self.key.clone_key())
            .map_err(|e| TlsError::Config(e.to_string()))?;
        Ok(Arc::new(cfg))
    }

    pub fn client_config(&self) -> Result<Arc<ClientConfig>, TlsError> {
        let cfg = ClientConfig::builder_with_provider(provider())
            .with_safe_default_protocol_versions()
            .map_err(|e| TlsError::Config(e.to_string()))?
            .with_root_certificates(self.roots()?)
            .with_client_auth_cert(self.chain.clone(), self.key.clone_key())
            .map_err(|e| TlsError::Config(e.to_string()))?;
        Ok(Arc::new(cfg))
    }

    fn roots(&self) -> Result<RootCertStore, TlsError> {
        let mut roots = RootCertStore::empty();
        for c in &self.ca {
            roots
                .add(c.clone())
                .map_err(|e| TlsError::Config(e.to_string()))?;
        }
        Ok(roots)
    }
}

pub fn server_name(identity: &str) -> Result<ServerName<'static>, TlsError> {
    ServerName::try_from(identity.to_owned()).map_err(|_| TlsError::BadIdentity(identity.to_owned()))
}

/// Checks that an (already chain-verified) peer certificate names `identity`.
pub fn verify_identity(cert: &CertificateDer<'_>, identity: &str) -> Result<(), TlsError> {
    let name = server_name(identity)?;
    let ee = webpki::EndEntityCert::try_from(cert)
        .map_err(|_| TlsError::IdentityMismatch(identity.to_owned()))?;
    ee.verify_is_valid_for_subject_name(&name)
        .map_err(|_| TlsError::IdentityMismatch(identity.to_owned()))
}

/// Generates a fresh CA plus one certificate per identity into `dir`.
pub fn generate(dir: &Path, identities: &[&str]) -> Result<(), TlsError> {
    let gen = |e: rcgen::Error| TlsError::Generate(e.to_string());
    let write = |path: PathBuf, contents: String| {
        fs::write(&path, contents).map_err(|source| TlsError::Io { path, source })
    };
    fs::create_dir_all(dir).map_err(|source| TlsError::Io {
        path: dir.to_owned(),
        source,
    })?;
    let ca_key = KeyPair::generate().map_err(gen)?;
    let mut ca_params = CertificateParams::new(Vec::<String>::new()).map_err(gen)?;
    ca_params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
    ca_params.key_usages = vec![
        KeyUsagePurpose::KeyCertSign,
        KeyUsagePurpose::CrlSign,
        KeyUsagePurpose::DigitalSignature,
    ];
    ca_params
        .distinguished_name
        .push(DnType::CommonName, "icu deployment CA");
    let ca = ca_params.self_signed(&ca_key).map_err(gen)?;
    write(dir.join("ca.pem"), ca.pem())?;
    for id in identities {
        server_name(id)?;
        let key = KeyPair::generate().map_err(gen)?;
        let mut params = CertificateParams::new(vec![(*id).to_owned()]).map_err(gen)?;
        params.distinguished_name.push(DnType::CommonName, *id);
        params.extended_key_usages = vec![
            ExtendedKeyUsagePurpose::ServerAuth,
            ExtendedKeyUsagePurpose::ClientAuth,
        ];
        let cert = params.signed_by(&key, &ca, &ca_key).map_err(gen)?;
        write(dir.join(format!("{id}.pem")), cert.pem())?;
        write(dir.join(format!("{id}.key")), key.serialize_pem())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_credentials_load_and_name_their_identity() {
        let dir = tempfile::tempdir().unwrap();
        generate(dir.path(), &["c1", "broker"]).unwrap();
        let c1 = Credentials::load(dir.path(), "c1").unwrap();
        c1.server_config().unwrap();
        c1.client_config().unwrap();
        verify_identity(&c1.chain[0], "c1").unwrap();
        assert!(verify_identity(&c1.chain[0], "c2").is_err());
    }

    #[test]
    fn invalid_identity_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            generate(dir.path(), &["bad id"]),
            Err(TlsError::BadIdentity(_))
        ));
    }
}
